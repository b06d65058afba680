import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sertk.autodiff import Tensor, no_grad
from sertk.autodiff import ops
from sertk.errors import NonFiniteValue, ShapeMismatch
from sertk.vit import (ModelConfig, VisionTransformer, attention_weights, count_flops, count_macs, encoder_block,
                       head_qkv_slice, init_params, multi_head_attention, parameter_shapes, patchify,
                       patchify_and_embed, preset, relative_position_index, relative_table_size, self_attention)

SMALL = ModelConfig(image_size=32, patch_size=16, embed_dim=16, heads=2, depth=1, mlp_dim=32)


def zero_branches(params, prefix):
    for name in ("attn.qkv", "attn.proj.weight", "attn.proj.bias", "mlp.fc1.weight", "mlp.fc1.bias",
                 "mlp.fc2.weight", "mlp.fc2.bias"):
        params[prefix + name].data[...] = 0.0


class TestConfig:
    def test_defaults(self):
        cfg = preset("vit-base")
        assert (cfg.n_patches, cfg.patch_dim, cfg.seq_len, cfg.head_dim) == (196, 768, 197, 64)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(image_size=100)
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=30, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(n_classes=5)
        with pytest.raises(ValueError):
            preset("vit-huge")

    def test_parameter_shapes(self):
        shapes = parameter_shapes(SMALL)
        assert shapes["pos_embed"] == (5, 16)
        assert shapes["blocks.0.attn.qkv"] == (16, 48)
        assert shapes["head.weight"] == (16, 4)
        assert "blocks.0.attn.rel_bias" not in shapes
        beit = parameter_shapes(ModelConfig(image_size=32, embed_dim=16, heads=2, depth=1, variant="beit"))
        assert beit["blocks.0.attn.rel_bias"] == (relative_table_size(2), 2)

    def test_relative_index(self):
        idx = relative_position_index(2)
        assert idx.shape == (5, 5)
        assert idx.max() == relative_table_size(2) - 1
        # patch pairs with the same offset share a slot
        assert idx[1, 2] == idx[3, 4]
        assert idx[1, 1] == idx[4, 4]
        assert len({idx[0, 1], idx[1, 0], idx[0, 0]}) == 3


class TestEmbed:
    def test_patchify_layout(self):
        img = np.arange(32 * 32 * 3, dtype=np.float32).reshape(1, 32, 32, 3)
        p = patchify(img, 16)
        assert p.shape == (1, 4, 768)
        assert np.array_equal(p[0, 1], img[0, :16, 16:32].reshape(-1))
        assert np.array_equal(p[0, 2], img[0, 16:32, :16].reshape(-1))

    def test_zero_image(self, rng):
        params = init_params(SMALL, rng)
        params["patch_proj.bias"].data[:] = rng.normal(size=16)
        z = patchify_and_embed(np.zeros((1, 32, 32, 3), np.float32), params, SMALL).data[0]
        want = params["patch_proj.bias"].data + params["pos_embed"].data[1:]
        assert np.array_equal(z[1:], want)
        assert np.array_equal(z[0], params["cls_token"].data + params["pos_embed"].data[0])

    def test_locality(self, rng):
        params = init_params(SMALL, rng)
        a = rng.random((1, 32, 32, 3)).astype(np.float32)
        b = a.copy()
        b[0, 16:, :16] += 0.5  # patch index 2
        za = patchify_and_embed(a, params, SMALL).data[0]
        zb = patchify_and_embed(b, params, SMALL).data[0]
        changed = np.flatnonzero(np.any(za != zb, axis=1))
        assert changed.tolist() == [3]

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            patchify_and_embed(np.zeros((1, 48, 48, 3), np.float32), init_params(SMALL, rng), SMALL)


class TestAttention:
    def test_single_token(self, rng):
        z = Tensor(rng.normal(size=(1, 8)), dtype=np.float64)
        u = Tensor(rng.normal(size=(8, 12)), dtype=np.float64)
        out, w = self_attention(z, u, return_weights=True)
        assert w.data.tolist() == [[1.0]]
        assert np.allclose(out.data, (z.data @ u.data)[:, 8:])

    def test_zero_query_uniform(self, rng):
        z = Tensor(rng.normal(size=(6, 8)), dtype=np.float64)
        u = rng.normal(size=(8, 12))
        u[:, :4] = 0.0
        out, w = self_attention(z, Tensor(u), return_weights=True)
        assert np.allclose(w.data, 1 / 6, atol=1e-15)
        v = z.data @ u[:, 8:]
        assert np.allclose(out.data, np.broadcast_to(v.mean(axis=0), (6, 4)), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2 ** 31))
    def test_rows_are_distributions(self, heads, t, seed):
        r = np.random.default_rng(seed)
        q = Tensor(r.normal(scale=3, size=(2, heads, t, 4)).astype(np.float32))
        k = Tensor(r.normal(scale=3, size=(2, heads, t, 4)).astype(np.float32))
        w = attention_weights(q, k).data
        assert np.all(w >= 0)
        assert np.max(np.abs(w.sum(axis=-1) - 1)) <= 1e-6

    def test_single_head_equals_self_attention(self, rng):
        z = Tensor(rng.normal(size=(1, 5, 8)), dtype=np.float64)
        uq, um = Tensor(rng.normal(size=(8, 24)), dtype=np.float64), Tensor(rng.normal(size=(8, 8)), dtype=np.float64)
        mb = Tensor(rng.normal(size=8), dtype=np.float64)
        got = multi_head_attention(z, uq, um, mb, heads=1).data
        want = self_attention(Tensor(z.data[0]), uq).data @ um.data + mb.data
        assert np.allclose(got[0], want, atol=1e-12)

    def test_heads_concat(self, rng):
        z = Tensor(rng.normal(size=(1, 5, 8)), dtype=np.float64)
        uq, um = Tensor(rng.normal(size=(8, 24)), dtype=np.float64), Tensor(rng.normal(size=(8, 8)), dtype=np.float64)
        mb = Tensor(np.zeros(8))
        heads = [self_attention(Tensor(z.data[0]), Tensor(head_qkv_slice(uq.data, h, 2))).data for h in range(2)]
        want = np.concatenate(heads, axis=1) @ um.data
        assert np.allclose(multi_head_attention(z, uq, um, mb, heads=2).data[0], want, atol=1e-12)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            self_attention(Tensor(np.zeros((3, 8))), Tensor(np.zeros((6, 12))))
        with pytest.raises(ShapeMismatch):
            multi_head_attention(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((8, 20))), Tensor(np.zeros((6, 8))),
                                 Tensor(np.zeros(8)), heads=2)


class TestBlock:
    @pytest.mark.parametrize("variant", ["vit", "beit"])
    def test_zero_branch_identity(self, rng, variant):
        cfg = ModelConfig(image_size=32, embed_dim=16, heads=2, depth=1, mlp_dim=32, variant=variant)
        params = init_params(cfg, rng)
        zero_branches(params, "blocks.0.")
        z = Tensor(rng.normal(size=(3, 5, 16)).astype(np.float32))
        assert np.array_equal(encoder_block(z, params, "blocks.0.", cfg).data, z.data)

    def test_permutation_equivariance(self, rng):
        params = init_params(SMALL, rng)
        for p in params.values():
            p.data[...] = rng.normal(scale=0.3, size=p.shape)
        z = rng.normal(size=(1, 5, 16)).astype(np.float32)
        perm = np.concatenate([[0], 1 + rng.permutation(4)])
        out = encoder_block(Tensor(z), params, "blocks.0.", SMALL).data
        out_p = encoder_block(Tensor(z[:, perm]), params, "blocks.0.", SMALL).data
        assert np.max(np.abs(out[:, perm] - out_p)) <= 1e-6

    def test_wrong_width(self, rng):
        with pytest.raises(ShapeMismatch):
            encoder_block(Tensor(np.zeros((1, 5, 8))), init_params(SMALL, rng), "blocks.0.", SMALL)


class TestClassify:
    def test_logits(self, rng):
        m = VisionTransformer(SMALL, seed=3)
        x = rng.random((3, 32, 32, 3)).astype(np.float32)
        z = m.logits(x)
        assert z.shape == (3, 4) and z.dtype == np.float32
        p = ops.softmax(Tensor(z)).data
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-6
        assert VisionTransformer(SMALL, seed=3).logits(x).tobytes() == z.tobytes()
        assert np.array_equal(m.logits(x[0]), z[:1])

    def test_nonfinite_params(self, rng):
        m = VisionTransformer(SMALL)
        m.params["head.bias"].data[0] = np.nan
        with pytest.raises(NonFiniteValue):
            m.logits(np.zeros((1, 32, 32, 3), np.float32))

    def test_copy_independent(self):
        m = VisionTransformer(SMALL)
        c = m.copy()
        c.params["head.bias"].data[0] = 1.0
        assert m.params["head.bias"].data[0] == 0.0
        assert m.n_parameters() == sum(int(np.prod(s)) for s in parameter_shapes(SMALL).values())

    def test_overfit_one_image(self, rng):
        from sertk.training import TrainConfig, fit

        m = VisionTransformer(SMALL, seed=1)
        x = rng.random((1, 32, 32, 3)).astype(np.float32)
        fit(m, x, [2], TrainConfig(learning_rate=1e-2, epochs=20, batch_size=1))
        assert m.predict(x).tolist() == [2]

    def test_full_model_gradcheck(self, rng):
        from sertk.autodiff import gradcheck

        cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=4, heads=2, depth=2, mlp_dim=6, variant="beit")
        m = VisionTransformer(cfg, seed=0, dtype=np.float64)
        for p in m.params.values():
            p.data[...] = rng.normal(scale=0.4, size=p.shape)
        x = rng.random((2, 8, 8, 3))
        f = lambda: ops.cross_entropy(m(x), [0, 3])  # noqa: E731
        for name, p in m.params.items():
            assert gradcheck(f, p).max_rel_error < 1e-4, name


class TestFlops:
    def test_vit_base(self):
        g = count_flops(preset("vit-base"))
        assert abs(g - 16.87) / 16.87 <= 0.02
        extra = count_flops(preset("vit-base"), "total_mac") - g
        assert extra == pytest.approx(12 * 2 * 197 ** 2 * 768 / 1e9, rel=1e-12)

    def test_hand_count(self):
        # patch 4*768*16 + block (5*16*48 + 5*16*16 + 2*5*16*32) + head 16*4
        assert count_macs(SMALL) == 59456
        assert count_macs(SMALL, "total_mac") == 59456 + 2 * 25 * 16

    def test_variant_costs_match(self):
        assert count_flops(preset("beit-base")) == count_flops(preset("vit-base"))

    @settings(max_examples=40)
    @given(st.sampled_from(["embed_dim", "depth", "mlp_dim", "image_size"]), st.sampled_from(["parametric_mac", "total_mac"]))
    def test_monotone(self, field, mode):
        base = ModelConfig(image_size=64, embed_dim=32, heads=2, depth=2, mlp_dim=64)
        bigger = {"embed_dim": 64, "depth": 3, "mlp_dim": 128, "image_size": 96}[field]
        cfg = ModelConfig(**{**base.to_dict(), field: bigger})
        assert count_macs(cfg, mode) > count_macs(base, mode)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            count_flops(SMALL, "flop")


def test_no_grad_inference_leaves_no_graph(rng):
    m = VisionTransformer(SMALL)
    with no_grad():
        out = m(rng.random((1, 32, 32, 3)).astype(np.float32))
    assert not out.requires_grad
