import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rpprep import autodiff as ad
from rpprep import cid
from rpprep.autodiff import Tensor
from rpprep.cid import CidBatch, NoiseSchedule, ToyConfig


def const_net(out):
    """A score network that ignores its input and returns fixed rows."""
    out = np.asarray(out, dtype=np.float64)
    return lambda z_t, t, c: Tensor(out)


def make_batch(z_h, z_g=None):
    z_h = np.asarray(z_h, dtype=np.float64)
    n = len(z_h)
    return CidBatch(z_h=z_h, z_t=Tensor(np.zeros_like(z_h)), t=np.zeros(n, dtype=int),
                    epsilon=np.zeros_like(z_h), z_g=None if z_g is None else Tensor(np.asarray(z_g, float)))


def val(x):
    return float(x.data[0])


class TestSchedule:
    def test_linear_betas(self):
        s = NoiseSchedule()
        assert s.beta[0] == 1e-4 and s.beta[-1] == pytest.approx(0.02)
        assert np.all(np.diff(s.beta) > 0)

    def test_alpha_bar_decreasing(self):
        ab = NoiseSchedule().alpha_bar
        assert np.all(np.diff(ab) < 0) and ab[0] == pytest.approx(0.9999)

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            NoiseSchedule(beta_start=0.1, beta_end=0.01)


class TestForwardNoise:
    def test_first_step(self):
        z0, eps = np.array([[1.0, -2.0]]), np.array([[0.5, 0.5]])
        with ad.precision(np.float64):
            zt = cid.forward_noise(z0, 0, eps).data
        np.testing.assert_allclose(zt, math.sqrt(0.9999) * z0 + 0.01 * eps, rtol=1e-12)

    def test_zero_signal(self):
        s = NoiseSchedule()
        eps = np.random.default_rng(0).standard_normal((4, 2))
        with ad.precision(np.float64):
            zt = cid.forward_noise(np.zeros((4, 2)), 500, eps, s).data
        np.testing.assert_allclose(zt, math.sqrt(1 - s.alpha_bar[500]) * eps, rtol=1e-12)

    def test_pure_noise_limit(self):
        s = NoiseSchedule(T=2000, beta_start=0.5, beta_end=0.999)
        eps = np.random.default_rng(1).standard_normal((3, 2))
        with ad.precision(np.float64):
            zt = cid.forward_noise(np.ones((3, 2)), 1999, eps, s).data
        assert s.alpha_bar[1999] == 0.0
        np.testing.assert_array_equal(zt, eps)

    def test_per_sample_timesteps(self):
        s = NoiseSchedule()
        z0 = np.ones((2, 2))
        with ad.precision(np.float64):
            zt = cid.forward_noise(z0, np.array([0, 999]), np.zeros((2, 2)), s).data
        np.testing.assert_allclose(zt[:, 0], np.sqrt(s.alpha_bar[[0, 999]]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cid.forward_noise(np.zeros((1, 2)), 1000, np.zeros((1, 2)))
        with pytest.raises(ValueError):
            cid.forward_noise(np.zeros((1, 2)), -1, np.zeros((1, 2)))

    def test_noise_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            cid.forward_noise(np.zeros((2, 2)), 3, np.zeros((2, 3)))

    def test_stepwise_matches_closed_form(self):
        s = NoiseSchedule()
        t = 200
        z0 = np.full((100_000, 1), 1.5)
        rng = np.random.default_rng(0)
        steps = cid.stepwise_noise(z0, t, rng, s)
        ab = s.alpha_bar[t]
        assert steps.mean() == pytest.approx(math.sqrt(ab) * 1.5, rel=0.01)
        assert steps.var() == pytest.approx(1 - ab, rel=0.01)


class TestIdentityLoss:
    def test_hand_example(self):
        z_h = np.array([[-1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]])
        real = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
        fake = real - np.array([1.0, 0.0, 1.0])
        assert val(cid.identity_loss(make_batch(z_h), const_net(real), const_net(fake))) == 2.0

    def test_equal_scores(self):
        r = np.random.default_rng(0).random((3, 2))
        assert val(cid.identity_loss(make_batch(np.ones((3, 2))), const_net(r), const_net(r))) == 0.0

    def test_real_equals_anchor(self):
        r = np.random.default_rng(1).random((3, 2))
        assert val(cid.identity_loss(make_batch(r), const_net(r), const_net(r * 2))) == 0.0

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.5, 2.0, -3.0, 0.25]))
    def test_bilinear_in_score_gap(self, seed, s):
        rng = np.random.default_rng(seed)
        z_h, real, gap = rng.integers(-8, 8, (3, 4, 2)).astype(float)
        b = make_batch(z_h)
        base = val(cid.identity_loss(b, const_net(real), const_net(real - gap)))
        scaled = val(cid.identity_loss(b, const_net(real), const_net(real - s * gap)))
        assert scaled == s * base

    def test_weighting(self):
        z_h = np.zeros((2, 1))
        real, fake = np.array([[1.0], [1.0]]), np.zeros((2, 1))
        w = lambda t: np.array([2.0, 0.0])
        assert val(cid.identity_loss(make_batch(z_h), const_net(real), const_net(fake), w)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cid.identity_loss(make_batch(np.zeros((2, 3))), const_net(np.zeros((2, 2))), const_net(np.zeros((2, 2))))


class TestScoreDiff:
    def test_hand_example(self):
        real, fake = np.array([[1.0, -1.0]]), np.zeros((1, 2))
        b = make_batch(np.zeros((1, 2)), z_g=[[2.0, 2.0]])
        assert val(cid.score_diff_loss(b, const_net(real), const_net(fake))) == 0.0

    def test_equal_scores_and_zero_latent(self):
        r = np.ones((2, 2))
        assert val(cid.score_diff_loss(make_batch(r, z_g=r), const_net(r), const_net(r))) == 0.0
        assert val(cid.score_diff_loss(make_batch(r, z_g=0 * r), const_net(r), const_net(2 * r))) == 0.0

    def test_gradient_is_score_gap(self):
        gap = np.array([[1.0, -2.0], [0.5, 3.0]])
        z_g = Tensor(np.ones((2, 2)), requires_grad=True)
        b = CidBatch(z_h=np.zeros((2, 2)), z_t=Tensor(np.zeros((2, 2))), t=np.zeros(2, int),
                     epsilon=np.zeros((2, 2)), z_g=z_g)
        with ad.precision(np.float64):
            (g,) = ad.gradients(cid.score_diff_loss(b, const_net(gap), const_net(np.zeros((2, 2)))), [z_g])
        np.testing.assert_array_equal(g, gap / 2)

    def test_missing_latent(self):
        with pytest.raises(ValueError, match="z_g"):
            cid.score_diff_loss(make_batch(np.zeros((1, 2))), const_net(np.zeros((1, 2))), const_net(np.zeros((1, 2))))


class TestObjective:
    def setup_method(self):
        z_h = np.array([[-1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]])
        self.real = const_net(np.array([[1.0, 0.0, 1.0]] * 2))
        self.fake = const_net(np.zeros((2, 3)))
        # L_id = 2; L_score = <[1,0,1], z_g> = 0.5 per row
        self.batch = make_batch(z_h, z_g=[[0.25, 0.0, 0.25]] * 2)

    def test_plugged_values(self):
        assert val(cid.cid_objective(self.batch, self.real, self.fake, xi=1.0)) == 1.5

    def test_xi_zero_is_identity_loss(self):
        assert val(cid.cid_objective(self.batch, self.real, self.fake, xi=0.0)) == \
            val(cid.identity_loss(self.batch, self.real, self.fake))

    def test_both_zero(self):
        r = const_net(np.ones((2, 3)))
        assert val(cid.cid_objective(make_batch(np.ones((2, 3)), np.zeros((2, 3))), r, r)) == 0.0

    @given(st.sampled_from([0.0, 0.5, 1.0, 2.0, 4.0]), st.sampled_from([0.25, 1.0, 3.0]))
    def test_linear_in_xi(self, x1, x2):
        l1 = val(cid.cid_objective(self.batch, self.real, self.fake, xi=x1))
        l2 = val(cid.cid_objective(self.batch, self.real, self.fake, xi=x2))
        ls = val(cid.score_diff_loss(self.batch, self.real, self.fake))
        assert l1 - l2 == (x2 - x1) * ls

    def test_negative_xi(self):
        with pytest.raises(ValueError):
            cid.cid_objective(self.batch, self.real, self.fake, xi=-1.0)


class TestToyDemo:
    def test_teacher_denoises_clean_modes(self):
        s = NoiseSchedule()
        t = cid.MixtureTeacher(cid.ring_means(), 0.05, s)
        with ad.precision(np.float64):
            out = t(Tensor(cid.ring_means() * math.sqrt(s.alpha_bar[3])), np.full(8, 3)).data
        np.testing.assert_allclose(out, cid.ring_means(), atol=1e-3)

    def test_generator_starts_as_identity(self):
        g = cid.ToyGenerator(np.random.default_rng(0))
        y = np.random.default_rng(1).standard_normal((5, 2)).astype(np.float32)
        np.testing.assert_array_equal(g(y).data, y)

    def test_short_runs_are_bit_identical(self):
        cfg = ToyConfig(steps=30, batch=32, eval_samples=100)
        a, b = cid.toy_distill_demo(3, cfg), cid.toy_distill_demo(3, cfg)
        assert a.l_id == b.l_id and a.final == b.final

    def test_report_json(self):
        cfg = ToyConfig(steps=5, batch=8, eval_samples=10)
        d = json.loads(cid.toy_distill_demo(0, cfg).to_json())
        assert d["seed"] == 0 and len(d["l_id"]) == 5 and d["config"]["steps"] == 5

    def test_reference_run(self, cid_report):
        assert not cid_report.aborted
        assert cid_report.l_id_reduction() >= 0.5
        assert cid_report.final["near_mode_fraction"] >= 0.8
