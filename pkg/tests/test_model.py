from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signrep import diffcore as dc
from signrep.diffcore import Tensor
from signrep.model import (
    CheckpointError,
    EncoderConfig,
    SignRepModel,
    inflate_patch_kernel,
    load_checkpoint,
    load_model,
    patchify,
    patchify_raw,
    random_mask,
    save_model,
    sincos_positions,
    standardize_clips,
    style_vector,
)
from signrep.priors import PRIOR_NAMES, PRIOR_SHAPES, prior_size

from gradcases import TINY, run_case


@pytest.fixture(scope="module")
def tiny():
    return SignRepModel(TINY, seed=3)


def _video(rng, cfg=TINY):
    return rng.uniform(0, 1, size=(cfg.frames, cfg.height, cfg.width, cfg.channels))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"height": 30}, {"frames": 15}, {"embed_dim": 30, "heads": 4}, {"mask_ratio": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)

    def test_token_arithmetic_for_fine_patches(self):
        cfg = EncoderConfig(patch_t=2, patch_s=4)
        assert cfg.num_tokens == 8 * 8 * 8 == 512
        assert cfg.num_tokens - round(0.8 * 512) == 102

    def test_default_token_count(self):
        assert EncoderConfig().num_tokens == 8 * 4 * 4


class TestTokens:
    def test_patchify_shape_and_determinism(self, tiny, rng):
        v = _video(rng)
        a, b = patchify(tiny, v), patchify(tiny, v.copy())
        assert a.shape == (TINY.num_tokens, TINY.embed_dim)
        np.testing.assert_array_equal(a.data, b.data)

    def test_patchify_rejects_bad_extents(self):
        with pytest.raises(ValueError):
            patchify_raw(np.zeros((5, 8, 8, 3)), 2, 4)

    def test_patch_layout(self):
        v = np.arange(4 * 8 * 8 * 1, dtype=float).reshape(4, 8, 8, 1)
        p = patchify_raw(v, 2, 4)
        # token 1 is time block 0, row block 0, column block 1
        np.testing.assert_array_equal(p[1][:4], v[0, 0, 4:8, 0])
        np.testing.assert_array_equal(p[1][16:20], v[1, 0, 4:8, 0])

    def test_standardize(self, rng):
        v = rng.uniform(0.2, 0.9, size=(2, 4, 8, 8, 3))
        s = standardize_clips(v)
        np.testing.assert_allclose(s.mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(s.std(axis=(1, 2, 3)), 1.0, atol=1e-5)
        # a constant colour shift per clip does not change the result
        np.testing.assert_allclose(standardize_clips(v + np.array([0.1, -0.05, 0.2])), s, atol=1e-9)

    def test_sincos_table(self):
        table = sincos_positions((2, 3, 4), 12)
        assert table.shape == (24, 12)
        # each axis uses (sin, cos) pairs, so each block has squared norm = half its width
        np.testing.assert_allclose((table[:, :4] ** 2).sum(axis=1), 2.0)
        assert len({tuple(r) for r in np.round(table, 12)}) == 24


class TestMask:
    def test_exact_visible_count(self):
        tokens = Tensor(np.arange(512 * 2, dtype=float).reshape(512, 2))
        vis, dropped = random_mask(tokens, 0.8, seed=1)
        assert vis.shape == (102, 2)
        assert dropped.sum() == 410

    def test_zero_ratio_keeps_everything(self):
        tokens = Tensor(np.ones((10, 3)))
        vis, dropped = random_mask(tokens, 0.0, seed=0)
        assert vis.shape == (10, 3) and not dropped.any()

    def test_seeded_and_ordered(self):
        tokens = Tensor(np.arange(100, dtype=float).reshape(100, 1))
        a, ma = random_mask(tokens, 0.5, seed=7)
        b, mb = random_mask(tokens, 0.5, seed=7)
        np.testing.assert_array_equal(ma, mb)
        assert np.all(np.diff(a.data[:, 0]) > 0)
        np.testing.assert_array_equal(a.data[:, 0], np.flatnonzero(~ma))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.floats(0.0, 0.99), st.integers(0, 1000))
    def test_count_property(self, n, ratio, seed):
        vis, dropped = random_mask(Tensor(np.zeros((n, 1))), ratio, seed)
        assert dropped.sum() == round(ratio * n)
        assert vis.shape[0] == n - round(ratio * n)

    def test_masked_embedding(self, tiny, rng):
        clips = np.stack([_video(rng) for _ in range(3)])
        z = tiny.embed_video(clips, 0.5, np.random.default_rng(0))
        assert z.shape == (3, TINY.num_tokens - round(0.5 * TINY.num_tokens), TINY.embed_dim)


class TestEncoderDecoder:
    def test_encode_shape(self, tiny, rng):
        out = tiny.encode(Tensor(rng.normal(size=(5, TINY.embed_dim))))
        assert out.shape == (5, TINY.embed_dim)

    def test_encode_needs_tokens(self, tiny):
        with pytest.raises(ValueError):
            tiny.encode(Tensor(np.zeros((1, 0, TINY.embed_dim))))

    def test_pool_identical_tokens(self, tiny, rng):
        tok = rng.normal(size=(1, 1, TINY.embed_dim))
        one = tiny.pool(Tensor(tok))
        many = tiny.pool(Tensor(np.repeat(tok, 6, axis=1)))
        np.testing.assert_allclose(many.data, one.data, atol=1e-12)
        assert one.shape == (1, TINY.embed_dim)

    def test_pool_order(self, tiny, rng):
        """mean, then layer norm, then the linear layer."""
        z = rng.normal(size=(2, 5, TINY.embed_dim))
        m = z.mean(axis=1)
        ln = (m - m.mean(-1, keepdims=True)) / np.sqrt(m.var(-1, keepdims=True) + 1e-5)
        d = tiny.decoder
        ln = ln * d.pool_norm.gamma.data + d.pool_norm.beta.data
        expect = ln @ d.pool_fc.weight.data + d.pool_fc.bias.data
        np.testing.assert_allclose(tiny.pool(Tensor(z)).data, expect, atol=1e-12)

    def test_decode_extents(self, tiny, rng):
        out = tiny.decode(Tensor(rng.normal(size=(2, TINY.embed_dim))))
        for name in PRIOR_NAMES:
            assert out[name].shape == (2, TINY.frames, prior_size(name))
        assert out["rh_ang"].shape[-1] == 82 == int(np.prod(PRIOR_SHAPES["rh_ang"]))
        assert out["activity"].shape == (2, 2)
        assert tiny.decoder.upsample(Tensor(rng.normal(size=(2, TINY.embed_dim)))).shape == (2, TINY.frames, TINY.decoder_dim)

    def test_decode_rejects_other_lengths(self, tiny, rng):
        with pytest.raises(ValueError):
            tiny.decode(Tensor(rng.normal(size=(1, TINY.embed_dim))), frames=TINY.frames * 2)

    @pytest.mark.parametrize("name", ["encode", "pool", "decode", "style_vector"])
    def test_gradients(self, name):
        worst, failures = run_case(name, points=3)
        assert failures == 0, worst

    def test_pipeline_gradient(self):
        worst, failures = run_case("pipeline", points=1)
        assert failures == 0, worst


class TestStyle:
    def test_hand_example(self):
        z = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(style_vector(z).data, [0.25, 0.25], atol=1e-15)

    def test_zero_tokens(self):
        np.testing.assert_array_equal(style_vector(Tensor(np.zeros((4, 3)))).data, 0.0)

    def test_permutation_invariant(self, rng):
        z = rng.normal(size=(2, 7, 5))
        perm = rng.permutation(7)
        np.testing.assert_allclose(style_vector(Tensor(z[:, perm])).data, style_vector(Tensor(z)).data, atol=1e-12)

    def test_batched_matches_loop(self, rng):
        z = rng.normal(size=(3, 4, 5))
        batched = style_vector(Tensor(z)).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], (z[i].T @ z[i] / 4).mean(axis=0), atol=1e-12)


class TestInflate:
    def test_fiber(self):
        old = np.zeros((1, 1, 3, 7, 7))
        old[0, 0, :, 2, 3] = [1.5, -2.0, 4.0]
        new = inflate_patch_kernel(old)
        np.testing.assert_array_equal(new[0, 0, :, 2, 3], [0, 1.5, 0, -2.0, 0, 4.0, 0])

    def test_sum_and_zero_slices(self, rng):
        old = rng.normal(size=(4, 3, 3, 7, 7))
        new = inflate_patch_kernel(old)
        assert new.shape == (4, 3, 7, 7, 7)
        assert new.sum() == old.sum()
        for k in (0, 2, 4, 6):
            assert not new[:, :, k].any()

    @pytest.mark.parametrize("shape", [(4, 3, 5, 7, 7), (3, 7, 7)])
    def test_bad_shape(self, shape):
        with pytest.raises(ValueError):
            inflate_patch_kernel(np.zeros(shape))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny, rng):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny, extra={"disc.w": np.ones((2, 2))}, meta={"note": "x"})
        model, config, rest = load_model(path, expect=TINY)
        for k, v in tiny.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[k], v)
        assert config["note"] == "x"
        np.testing.assert_array_equal(rest["disc.w"], np.ones((2, 2)))
        clip = _video(rng)[None]
        np.testing.assert_array_equal(model.pool(model.embed_video(clip)).data, tiny.pool(tiny.embed_video(clip)).data)

    def test_wrong_config(self, tmp_path, tiny):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny)
        with pytest.raises(CheckpointError):
            load_model(path, expect=EncoderConfig())

    @pytest.mark.parametrize("cut", [4, 40, -3])
    def test_corrupt(self, tmp_path, tiny, cut):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny)
        raw = path.read_bytes()
        path.write_bytes(raw[:cut] if cut > 0 else raw[:cut])
        with pytest.raises((CheckpointError, ValueError)):
            load_checkpoint(path)


class TestParameterGroups:
    def test_layer_decay_scales(self, tiny):
        names = [n for n, _ in tiny.named_parameters()]
        scales = dict(zip(names, tiny.layer_decay_scales(0.85)))
        top = TINY.blocks + 1
        assert scales["embed.weight"] == pytest.approx(0.85 ** top)
        assert scales["blocks.0.q.weight"] == pytest.approx(0.85 ** (top - 1))
        assert scales["decoder.pool_fc.weight"] == 1.0

    def test_state_dict_strict(self, tiny):
        state = tiny.state_dict()
        state.pop("pos")
        with pytest.raises((KeyError, ValueError)):
            SignRepModel(TINY).load_state_dict(state)

    def test_backward_reaches_every_parameter(self, tiny, rng):
        tiny.zero_grad()
        clips = np.stack([_video(rng) for _ in range(2)])
        out = tiny.decode(tiny.pool(tiny.embed_video(clips)))
        loss = dc.tsum(dc.square(out["body_ang"])) + dc.tsum(out["activity"])
        for name in PRIOR_NAMES:
            loss = loss + dc.mean(out[name])
        loss.backward()
        missing = [n for n, p in tiny.named_parameters() if p.grad is None]
        assert missing == []
