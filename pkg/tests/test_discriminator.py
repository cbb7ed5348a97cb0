from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from signrep import diffcore as dc
from signrep import synth
from signrep.diffcore import Tensor
from signrep.discriminator import (
    STYLE_SCALE,
    Discriminator,
    EmaPair,
    SNLinear,
    bce_from_logits,
    bce_update,
    discriminate,
    ema_update,
    make_optimizer,
    make_pairs,
    spectral_normalize,
)
from signrep.model import EncoderConfig, SignRepModel, style_vector

D = 8


@pytest.fixture
def disc():
    return Discriminator(D, seed=4)


class TestSpectralNorm:
    def test_diagonal_example(self):
        out = spectral_normalize(np.diag([3.0, 1.0]), n_iter=5)
        np.testing.assert_allclose(out, np.diag([1.0, 1.0 / 3.0]), atol=1e-9)

    def test_normalized_matrix_is_fixed(self, rng):
        w = rng.normal(size=(6, 6))
        w /= np.linalg.svd(w, compute_uv=False)[0]
        np.testing.assert_allclose(spectral_normalize(w, n_iter=20), w, rtol=0.05)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_16x16_against_svd(self, seed):
        w = np.random.default_rng(seed).normal(size=(16, 16))
        top = np.linalg.svd(spectral_normalize(w, seed=seed), compute_uv=False)[0]
        assert 0.95 <= top <= 1.05

    def test_more_iterations_never_hurt_on_average(self):
        errs = {}
        for n in (5, 50):
            errs[n] = np.mean([abs(np.linalg.svd(spectral_normalize(np.random.default_rng(s).normal(size=(16, 16)), n_iter=n, seed=s),
                                                 compute_uv=False)[0] - 1) for s in range(20)])
        assert errs[50] < errs[5]

    def test_zero_matrix(self):
        with pytest.raises(ValueError):
            spectral_normalize(np.zeros((3, 3)))

    def test_persistent_vectors_converge(self, rng):
        layer = SNLinear(12, 7, rng)
        for _ in range(30):
            sigma = layer.sigma(update=True)
        assert sigma == pytest.approx(np.linalg.svd(layer.inner.weight.data, compute_uv=False)[0], rel=1e-6)

    def test_layer_uses_normalized_weight(self, rng):
        layer = SNLinear(5, 4, rng)
        for _ in range(50):
            layer.sigma(update=True)
        x = rng.normal(size=(3, 5))
        w = layer.inner.weight.data
        expect = x @ (w / np.linalg.svd(w, compute_uv=False)[0]) + layer.inner.bias.data
        np.testing.assert_allclose(layer(Tensor(x)).data, expect, rtol=1e-6)


class TestForward:
    def test_output_range_and_shape(self, disc, rng):
        out = discriminate(disc, Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(5, D)) * 0.01))
        assert out.shape == (5,)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_style_scale_stage(self, disc, rng):
        s = rng.normal(size=(2, D))
        small = disc.scaled_style(Tensor(0.01 * s)).data
        big = disc.scaled_style(Tensor(s)).data
        np.testing.assert_allclose(big, 100.0 * small, rtol=1e-15)
        assert STYLE_SCALE == 100.0

    def test_gradient_wrt_z_avg(self, disc, rng):
        s = Tensor(rng.normal(size=(3, D)) * 0.01)
        report = dc.grad_check(lambda a: dc.tsum(disc(a, s)), rng.normal(size=(3, D)))
        assert report.passed(1e-4)

    def test_frozen_forward_leaves_parameters_without_grad(self, disc, rng):
        a = Tensor(rng.normal(size=(4, D)), requires_grad=True)
        disc.zero_grad()
        dc.tsum(disc(a, Tensor(rng.normal(size=(4, D))), frozen=True)).backward()
        assert a.grad is not None
        assert all(p.grad is None for p in disc.parameters())


class TestPairs:
    def test_example(self):
        matched, unmatched = make_pairs(["A", "A", "B", "B"], seed=0)
        assert matched == [(0, 1), (1, 0), (2, 3), (3, 2)]
        ids = ["A", "A", "B", "B"]
        assert all(ids[i] != ids[j] for i, j in unmatched)

    @given(st.integers(2, 8), st.integers(0, 10_000))
    def test_unmatched_never_same_video(self, pairs, seed):
        ids = [v for v in range(pairs) for _ in range(2)]
        matched, unmatched = make_pairs(ids, seed)
        assert all(ids[i] == ids[j] and i != j for i, j in matched)
        assert all(ids[i] != ids[j] for i, j in unmatched)
        assert [i for i, _ in unmatched] == list(range(len(ids)))

    def test_seeded(self):
        ids = [0, 0, 1, 1, 2, 2, 3, 3]
        assert make_pairs(ids, 5) == make_pairs(ids, 5)

    @pytest.mark.parametrize("ids", [[0, 0, 1], [0, 0, 0, 1, 1], [2, 2]])
    def test_invalid_batches(self, ids):
        with pytest.raises(ValueError):
            make_pairs(ids, 0)


class TestBCE:
    def test_half_everywhere_is_ln2(self):
        loss = bce_from_logits(Tensor(np.zeros(6)), np.array([1, 1, 1, 0, 0, 0]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_perfect_limit(self):
        logits = Tensor(np.array([40.0, 40.0, -40.0]))
        assert bce_from_logits(logits, np.array([1, 1, 0])).item() < 1e-15

    def test_matches_sigmoid_formula(self, rng):
        x = rng.normal(size=7)
        y = (rng.random(7) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-x))
        expect = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce_from_logits(Tensor(x), y).item() == pytest.approx(expect, rel=1e-12)

    def test_update_touches_only_discriminator(self, rng):
        model = SignRepModel(EncoderConfig(frames=4, height=8, width=8, patch_s=4, embed_dim=D, heads=2, blocks=1), seed=0)
        before_model = {k: v.copy() for k, v in model.state_dict().items()}
        z = model.embed_video(rng.uniform(size=(4, 4, 8, 8, 3)))
        z_avg, z_style = model.pool(z), style_vector(z)
        disc = Discriminator(D, seed=1)
        before_disc = {k: v.copy() for k, v in disc.state_dict().items()}
        matched, unmatched = make_pairs([0, 0, 1, 1], 0)
        bce_update(disc, z_avg.data, z_style.data, matched, unmatched, make_optimizer(disc), 1e-3)
        assert all(np.array_equal(model.state_dict()[k], v) for k, v in before_model.items())
        assert any(not np.array_equal(disc.state_dict()[k], v) for k, v in before_disc.items())

    def test_optimizer_defaults(self, disc):
        opt = make_optimizer(disc)
        assert opt.betas == (0.5, 0.9) and opt.weight_decay == 1e-3


class TestEma:
    def test_formula(self):
        e = ema_update(EmaPair(), 1.0, 0.5)
        assert e.matched == pytest.approx(0.55) and e.unmatched == 0.5

    def test_fixed_point(self):
        e = ema_update(EmaPair(0.3, 0.7), 0.3, 0.7)
        assert e.matched == pytest.approx(0.3, abs=1e-15) and e.unmatched == pytest.approx(0.7, abs=1e-15)

    def test_geometric_convergence(self):
        e = EmaPair()
        for n in range(1, 60):
            e = e.update(0.9, 0.1)
            assert e.matched == pytest.approx(0.9 - 0.4 * 0.9 ** n, abs=1e-12)
        assert e.gate_open

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=50))
    def test_stays_in_unit_interval(self, xs):
        e = EmaPair()
        for m, u in xs:
            e = e.update(m, u)
            assert 0.0 <= e.matched <= 1.0 and 0.0 <= e.unmatched <= 1.0

    def test_gate_closed_at_init(self):
        assert not EmaPair().gate_open


@pytest.mark.slow
def test_discriminator_separates_styles_within_500_steps():
    """Trained alone on a frozen random encoder, matched outputs end above unmatched ones."""
    m = synth.make_dataset(4, 4, 0)
    model = SignRepModel(EncoderConfig(), seed=0)
    rng = np.random.default_rng(0)
    clips, vids = [], []
    for i, e in enumerate(m.entries):
        v = m.video_of(e)
        for s in (0, 8, 16):
            clips.append(v[s:s + 16])
            vids.append(i)
    z = model.embed_video(np.stack(clips).astype(np.float64), 0.8, rng)
    z_avg, z_style = model.pool(z).data, style_vector(z).data
    vids = np.array(vids)
    disc = Discriminator(64, seed=1)
    opt = make_optimizer(disc)

    def batch():
        rows = []
        for v in rng.choice(len(m.entries), 6, replace=False):
            rows += list(rng.choice(np.flatnonzero(vids == v), 2, replace=False))
        return rows, *make_pairs(vids[rows].tolist(), rng)

    for _ in range(500):
        rows, matched, unmatched = batch()
        bce_update(disc, z_avg[rows], z_style[rows], matched, unmatched, opt, 1e-4)
    dm, du = [], []
    for _ in range(20):
        rows, matched, unmatched = batch()
        dm.append(disc(z_avg[[rows[i] for i, _ in matched]], z_style[[rows[j] for _, j in matched]]).data.mean())
        du.append(disc(z_avg[[rows[i] for i, _ in unmatched]], z_style[[rows[j] for _, j in unmatched]]).data.mean())
    assert np.mean(dm) > np.mean(du)
