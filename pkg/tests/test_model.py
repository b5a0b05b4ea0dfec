"""Encoder, attention pooling, classifier, and bag-level forward behavior."""

import math

import numpy as np
import pytest

from smearkit import autodiff as ad
from smearkit import model as md
from smearkit.bagging import Bag, Patch

TINY = md.ModelConfig(mode="bacteria", n_categories=3, encoder="builtin-cnn",
                      embed_dim=8, attn_heads=2, attn_width=4,
                      cnn_channels=(2, 4, 8, 8), patch_size=16)


def make_bag(pixels_list, bag_id="b0", label=0):
    patches = tuple(
        Patch(pixels=px, center=(0, 0), source_instance=i + 1,
              patch_id=f"{bag_id}:{i+1:04d}")
        for i, px in enumerate(pixels_list))
    return Bag(bag_id=bag_id, patient_id="p0", image_ref="", label=label,
               patches=patches)


def random_patches(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, (size, size, 3)).astype(np.uint8) for _ in range(n)]


class TestEncoder:
    def test_zero_weights_give_constant_embedding(self):
        params = md.init_params(TINY, seed=0)
        for name, t in params.items():
            if name.startswith("enc."):
                t.data = np.zeros_like(t.data)
        model = md.MilModel(TINY, params)
        h1 = model.bag_embeddings(make_bag(random_patches(1, seed=1))).data
        h2 = model.bag_embeddings(make_bag(random_patches(1, seed=2))).data
        assert np.array_equal(h1, h2)
        assert np.array_equal(h1, np.zeros_like(h1))

    def test_identical_patches_identical_embeddings(self):
        params = md.init_params(TINY, seed=1)
        model = md.MilModel(TINY, params)
        px = random_patches(1, seed=3)[0]
        h = model.bag_embeddings(make_bag([px, px.copy()])).data
        assert np.array_equal(h[0], h[1])

    def test_pixel_perturbation_changes_embedding(self):
        params = md.init_params(TINY, seed=2)
        model = md.MilModel(TINY, params)
        px = random_patches(1, seed=4)[0]
        px2 = px.copy()
        px2[8, 8, 0] = (int(px2[8, 8, 0]) + 128) % 256
        h = model.bag_embeddings(make_bag([px, px2])).data
        assert not np.array_equal(h[0], h[1])

    def test_wrong_patch_size_rejected(self):
        params = md.init_params(TINY, seed=0)
        model = md.MilModel(TINY, params)
        with pytest.raises(md.ModelError):
            model.bag_embeddings(make_bag(random_patches(1, size=32)))


class TestAttention:
    def head(self, v, w):
        return ad.Tensor(np.asarray(v, np.float64)), ad.Tensor(np.asarray(w, np.float64))

    def test_single_instance_weight_one(self):
        v, w = self.head(np.ones((4, 8)), np.ones(4))
        a = md.attention_weights(v, w, ad.Tensor(np.random.default_rng(0).normal(size=(1, 8))))
        assert a.data.shape == (1, 1)
        assert a.data[0, 0] == 1.0

    def test_identical_rows_split_evenly(self):
        rng = np.random.default_rng(1)
        v, w = self.head(rng.normal(size=(4, 8)), rng.normal(size=4))
        row = rng.normal(size=8)
        a = md.attention_weights(v, w, ad.Tensor(np.stack([row, row])))
        assert np.allclose(a.data, 0.5, atol=1e-12)

    def test_scalar_case_matches_hand_computation(self):
        # D=L=1, V=[1], w=[1], h=[0, 10]: e = tanh -> softmax ~ [0.2689, 0.7311]
        v, w = self.head([[1.0]], [1.0])
        a = md.attention_weights(v, w, ad.Tensor(np.array([[0.0], [10.0]])))
        e1 = math.tanh(10.0)
        expect = np.array([1.0, math.exp(e1)])
        expect /= expect.sum()
        assert np.allclose(a.data[0], expect, atol=1e-7)
        assert a.data[0, 0] == pytest.approx(0.2689, abs=2e-4)
        assert a.data[0, 1] == pytest.approx(0.7311, abs=2e-4)

    def test_weights_positive_and_normalized(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = int(rng.integers(1, 40))
            v, w = self.head(rng.normal(size=(4, 8)), rng.normal(size=4))
            a = md.attention_weights(v, w, ad.Tensor(rng.normal(size=(k, 8)))).data
            assert (a > 0).all()
            assert abs(a.sum() - 1.0) < 1e-6


class TestMilPool:
    def test_k1_collapse_exact(self):
        params = md.init_params(TINY, seed=3)
        h = np.random.default_rng(4).normal(size=(1, 8)).astype(np.float32)
        z = md.mil_pool(params, TINY, ad.Tensor(h)).data
        assert z.shape == (1, 16)
        assert np.array_equal(z[0, :8], h[0])
        assert np.array_equal(z[0, 8:], h[0])

    def test_identical_instances_collapse(self):
        params = md.init_params(TINY, seed=4)
        row = np.random.default_rng(5).normal(size=8).astype(np.float32)
        z = md.mil_pool(params, TINY, ad.Tensor(np.stack([row, row, row]))).data
        assert np.allclose(z[0, :8], row, atol=1e-6)

    def test_matches_scalar_loop_oracle(self):
        params = md.init_params(TINY, seed=5, dtype=np.float64)
        rng = np.random.default_rng(6)
        hmat = rng.normal(size=(3, 8))
        z = md.mil_pool(params, TINY, ad.Tensor(hmat)).data[0]
        for head in range(2):
            v = params[f"attn.head{head}.V"].data
            w = params[f"attn.head{head}.w"].data
            scores = []
            for k in range(3):
                s = 0.0
                for li in range(4):
                    acc = 0.0
                    for di in range(8):
                        acc += v[li, di] * hmat[k, di]
                    s += w[li] * math.tanh(acc)
                scores.append(s)
            m = max(scores)
            expw = [math.exp(s - m) for s in scores]
            atten = [e / sum(expw) for e in expw]
            for di in range(8):
                expect = sum(atten[k] * hmat[k, di] for k in range(3))
                assert z[head * 8 + di] == pytest.approx(expect, rel=1e-10)

    def test_empty_bag_rejected(self):
        params = md.init_params(TINY, seed=0)
        with pytest.raises((md.ModelError, ad.AutodiffError)):
            md.mil_pool(params, TINY, ad.Tensor(np.zeros((0, 8))))


class TestClassifier:
    def test_zero_weights_give_bias(self):
        params = md.init_params(TINY, seed=6)
        params["clf.W"].data = np.zeros_like(params["clf.W"].data)
        params["clf.b"].data = np.array([1.0, -2.0, 3.0], np.float32)
        z = ad.Tensor(np.random.default_rng(7).normal(size=(1, 16)).astype(np.float32))
        logits = md.classify(params, TINY, z).data
        assert np.allclose(logits, [[1.0, -2.0, 3.0]], atol=1e-7)

    def test_matches_dot_product_oracle(self):
        params = md.init_params(TINY, seed=8, dtype=np.float64)
        rng = np.random.default_rng(9)
        z = rng.normal(size=(1, 16))
        logits = md.classify(params, TINY, ad.Tensor(z)).data[0]
        w, b = params["clf.W"].data, params["clf.b"].data
        for c in range(3):
            expect = b[c] + sum(w[c, j] * z[0, j] for j in range(16))
            assert logits[c] == pytest.approx(expect, rel=1e-12)

    def test_length_mismatch_rejected(self):
        params = md.init_params(TINY, seed=0)
        with pytest.raises(md.ModelError):
            md.classify(params, TINY, ad.Tensor(np.zeros((1, 5))))


class TestForwardBag:
    def test_composition(self):
        params = md.init_params(TINY, seed=10)
        model = md.MilModel(TINY, params)
        bag = make_bag(random_patches(1, seed=11))
        logits = model.forward_bag(bag)
        hmat = model.bag_embeddings(bag)
        z = md.mil_pool(params, TINY, hmat)
        expect = md.classify(params, TINY, z).data[0]
        assert np.array_equal(logits, expect)

    def test_permutation_invariance_float32(self):
        rng = np.random.default_rng(12)
        params = md.init_params(TINY, seed=13)
        model = md.MilModel(TINY, params)
        for trial in range(20):
            k = int(rng.integers(1, 65))
            pixels = random_patches(k, seed=100 + trial)
            bag = make_bag(pixels)
            perm = rng.permutation(k)
            bag_p = make_bag([pixels[i] for i in perm])
            a, b = model.forward_bag(bag), model.forward_bag(bag_p)
            rel = np.abs(a - b) / np.maximum(1e-12, np.abs(a))
            assert rel.max() < 1e-4

    def test_permutation_invariance_float64(self):
        params = md.init_params(TINY, seed=14, dtype=np.float64)
        model = md.MilModel(TINY, params)
        pixels = random_patches(12, seed=15)
        bag = make_bag(pixels)
        bag_p = make_bag(pixels[::-1])
        a, b = model.forward_bag(bag), model.forward_bag(bag_p)
        rel = np.abs(a - b) / np.maximum(1e-12, np.abs(a))
        assert rel.max() < 1e-10

    def test_duplication_halves_attention(self):
        cfg = md.ModelConfig(mode="bacteria", n_categories=3, encoder="frozen-table",
                             embed_dim=8, attn_heads=2, attn_width=4, patch_size=16)
        rng = np.random.default_rng(16)
        vectors = rng.normal(size=(4, 8)).astype(np.float32)
        ids = [f"b0:{i+1:04d}" for i in range(2)] + [f"b1:{i+1:04d}" for i in range(4)]
        table = md.FrozenEmbeddingTable(
            ids, np.concatenate([vectors[:2], np.repeat(vectors[:2], 2, axis=0)]))
        params = md.init_params(cfg, seed=17)
        model = md.MilModel(cfg, params, table)
        px = random_patches(4, seed=18)
        unique = make_bag(px[:2], bag_id="b0")
        doubled = make_bag(px[:4], bag_id="b1")
        a = model.forward_bag(unique)
        b = model.forward_bag(doubled)
        rel = np.abs(a - b) / np.maximum(1e-12, np.abs(a))
        assert rel.max() < 1e-4
        # attention over the duplicated bag halves each unique weight
        v, w = params["attn.head0.V"], params["attn.head0.w"]
        att_u = md.attention_weights(v, w, ad.Tensor(vectors[:2])).data[0]
        att_d = md.attention_weights(
            v, w, ad.Tensor(np.repeat(vectors[:2], 2, axis=0))).data[0]
        assert np.allclose(att_d[0] + att_d[1], att_u[0], atol=1e-6)
        assert np.allclose(att_d[2] + att_d[3], att_u[1], atol=1e-6)


class TestFrozenTable:
    def test_missing_key_names_patch(self):
        table = md.FrozenEmbeddingTable(["a:0001"], np.zeros((1, 8), np.float32))
        with pytest.raises(md.ModelError, match="zz:0042"):
            table.lookup(["zz:0042"])

    def test_vectors_read_only(self):
        table = md.FrozenEmbeddingTable(["a"], np.ones((1, 4), np.float32))
        out = table.lookup(["a"])
        out[:] = 7   # mutating the returned copy must not touch the table
        assert (table.lookup(["a"]) == 1).all()

    def test_dim_mismatch_rejected(self):
        cfg = md.ModelConfig(mode="fungi", n_categories=4, encoder="frozen-table",
                             embed_dim=8, patch_size=224)
        table = md.FrozenEmbeddingTable(["a"], np.ones((1, 5), np.float32))
        with pytest.raises(md.ModelError):
            md.MilModel(cfg, md.init_params(cfg, seed=0), table)


class TestModelIO:
    def test_save_load_round_trip(self, tmp_path):
        params = md.init_params(TINY, seed=19)
        model = md.MilModel(TINY, params)
        path = tmp_path / "m.ckpt"
        model.save(path)
        back = md.MilModel.load(path)
        assert back.config == TINY
        for name, t in params.items():
            assert np.array_equal(back.params[name].data, t.data)
        bag = make_bag(random_patches(3, seed=20))
        assert np.array_equal(model.forward_bag(bag), back.forward_bag(bag))

    def test_emb1_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        ids = [f"x:{i:04d}" for i in range(7)]
        vectors = rng.normal(size=(7, 12)).astype(np.float32)
        md.write_embedding_file(tmp_path / "e.emb", ids, vectors)
        raw = (tmp_path / "e.emb").read_bytes()
        assert raw[:4] == b"EMB1"
        back_ids, back = md.read_embedding_file(tmp_path / "e.emb")
        assert back_ids == ids
        assert np.array_equal(back, vectors)
