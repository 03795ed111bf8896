"""Consistent score-identity distillation objectives and a 2-D toy demonstration.

Score networks here are denoisers: ``f(z_t, t, c)`` predicts the clean
sample from its noised version, which is the quantity the identity loss
compares against the clean anchor ``z_h``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, Linear, Module, cosine_lr


class ScoreNet(Protocol):
    def __call__(self, z_t: Tensor, t: np.ndarray, c) -> Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 2 or not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need T >= 2 and 0 < beta_start < beta_end < 1")

    @property
    def beta(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)


def _check_t(t, sched: NoiseSchedule):
    t = np.asarray(t)
    if t.dtype.kind not in "iu" or np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timesteps must be integers in [0, {sched.T})")
    return t


def _per_sample(values, shape):
    """Broadcast one value per batch row across the trailing latent axes."""
    v = np.asarray(values, dtype=np.float64)
    return np.broadcast_to(v.reshape(v.shape + (1,) * (len(shape) - v.ndim)), shape)


def forward_noise(z0, t, epsilon, sched: NoiseSchedule = NoiseSchedule()):
    """Closed-form noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one index per batch row.
    """
    t = _check_t(t, sched)
    z0 = ad.as_tensor(z0)
    eps = np.asarray(epsilon.data if isinstance(epsilon, Tensor) else epsilon)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    ab = sched.alpha_bar[t]
    a = _per_sample(np.sqrt(ab), z0.shape).astype(z0.dtype)
    s = _per_sample(np.sqrt(1.0 - ab), z0.shape)
    return z0 * a + (s * eps).astype(z0.dtype)


def stepwise_noise(z0, t, rng, sched: NoiseSchedule = NoiseSchedule()):
    """Run the one-step Gaussian transitions for steps 0..t (inclusive) on numpy arrays."""
    t = int(_check_t(t, sched))
    x = np.array(z0, dtype=np.float64)
    beta = sched.beta
    for s in range(t + 1):
        x = math.sqrt(1.0 - beta[s]) * x + math.sqrt(beta[s]) * rng.standard_normal(x.shape)
    return x


@dataclass
class CidBatch:
    z_h: np.ndarray
    z_t: Tensor
    t: np.ndarray
    epsilon: np.ndarray
    c: np.ndarray | None = None
    z_g: Tensor | None = None

    def __post_init__(self):
        n = np.shape(self.z_h)[0]
        for name in ("z_t", "t", "epsilon", "z_g", "c"):
            v = getattr(self, name)
            if v is not None and np.shape(v.data if isinstance(v, Tensor) else v)[0] != n:
                raise ValueError(f"batch dimension of {name} differs from z_h")


def _unit_weight(t):
    return np.ones(np.shape(t))


def _rowdot(a: Tensor, b) -> Tensor:
    """Per-sample inner product over all non-batch axes, shape (B,)."""
    prod = a * b
    axes = tuple(range(1, prod.ndim))
    return ad.tsum(prod, axis=axes) if axes else prod


def identity_loss(batch: CidBatch, f_real: ScoreNet, f_fake: ScoreNet,
                  w_t: Callable = _unit_weight) -> Tensor:
    """Mean of w(t) <f_real - f_fake, f_real - z_h>."""
    real = f_real(batch.z_t, batch.t, batch.c)
    fake = f_fake(batch.z_t, batch.t, batch.c)
    if real.shape != fake.shape or real.shape != np.shape(batch.z_h):
        raise ValueError("score outputs and anchor must share a shape")
    inner = _rowdot(real - fake, real - ad.as_tensor(batch.z_h))
    w = np.asarray(w_t(batch.t), dtype=np.float64) * np.ones(inner.shape)
    return ad.mean(inner * w.astype(inner.dtype))


def score_diff_loss(batch: CidBatch, f_real: ScoreNet, f_fake: ScoreNet) -> Tensor:
    """Mean of <stop_grad(f_real - f_fake), z_g>; its gradient routes the score gap through z_g."""
    if batch.z_g is None:
        raise ValueError("score_diff_loss needs the generated latent z_g")
    with ad.no_grad():
        diff = (f_real(batch.z_t, batch.t, batch.c) - f_fake(batch.z_t, batch.t, batch.c)).data
    z_g = ad.as_tensor(batch.z_g)
    if diff.shape != z_g.shape:
        raise ValueError("score outputs and z_g must share a shape")
    return ad.mean(_rowdot(z_g, diff.astype(z_g.dtype)))


def cid_objective(batch: CidBatch, f_real: ScoreNet, f_fake: ScoreNet, xi=1.0,
                  w_t: Callable = _unit_weight) -> Tensor:
    if xi < 0:
        raise ValueError("xi must be >= 0")
    l_id = identity_loss(batch, f_real, f_fake, w_t)
    if xi == 0:
        return l_id
    return l_id - score_diff_loss(batch, f_real, f_fake) * xi


# -- toy problem ------------------------------------------------------------

def ring_means(k=8, radius=2.0):
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


class MixtureTeacher:
    """Exact posterior-mean denoiser for an isotropic Gaussian mixture with equal weights."""

    def __init__(self, means, std, sched: NoiseSchedule):
        self.means = np.asarray(means, dtype=np.float64)
        self.std = float(std)
        self.sched = sched

    def __call__(self, z_t, t, c=None):
        z_t = ad.as_tensor(z_t)
        b, d = z_t.shape
        k = len(self.means)
        ab = self.sched.alpha_bar[np.asarray(t) * np.ones(b, dtype=int)]
        var = ab * self.std ** 2 + (1.0 - ab)
        gain = np.sqrt(ab) * self.std ** 2 / var
        centers = np.sqrt(ab)[:, None, None] * self.means[None]  # (B, K, D)
        z = ad.broadcast_to(ad.reshape(z_t, (b, 1, d)), (b, k, d))
        diff = z - centers.astype(z_t.dtype)
        logits = ad.tsum(diff * diff, axis=-1) * (-0.5 / var[:, None] * np.ones((b, k))).astype(z_t.dtype)
        resp = ad.softmax(logits, axis=-1)
        post = diff * np.broadcast_to(gain[:, None, None], (b, k, d)).astype(z_t.dtype) \
            + np.broadcast_to(self.means[None], (b, k, d)).astype(z_t.dtype)
        weights = ad.broadcast_to(ad.reshape(resp, (b, k, 1)), (b, k, d))
        return ad.tsum(weights * post, axis=1)

    def sample(self, rng, n):
        idx = rng.integers(0, len(self.means), n)
        return self.means[idx] + self.std * rng.standard_normal((n, self.means.shape[1]))


class MLP(Module):
    def __init__(self, sizes, rng, zero_last=False):
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.leaky_relu(x, 0.2)
        return x


class FakeScore(Module):
    """Trainable denoiser with skip/output scalings chosen for unit-variance targets."""

    def __init__(self, rng, sched: NoiseSchedule, data_std=1.4, hidden=64):
        self.sched = sched
        self.data_std = data_std
        self.net = MLP([5, hidden, hidden, 2], rng)

    def __call__(self, z_t, t, c=None):
        z_t = ad.as_tensor(z_t)
        b = z_t.shape[0]
        ab = self.sched.alpha_bar[np.asarray(t) * np.ones(b, dtype=int)]
        sd2 = self.data_std ** 2
        norm = np.sqrt(ab * sd2 + 1.0 - ab)
        c_skip = np.sqrt(ab) * sd2 / norm ** 2
        c_out = np.sqrt(1.0 - ab) * self.data_std / norm
        log_sigma = 0.5 * np.log((1.0 - ab) / ab)
        feats = np.stack([log_sigma / 4.0, np.sin(log_sigma), np.cos(log_sigma)], axis=1)
        x_in = ad.concat([z_t * _per_sample(1.0 / norm, z_t.shape).astype(z_t.dtype),
                          Tensor(feats.astype(z_t.dtype))], axis=1)
        out = self.net(x_in)
        return z_t * _per_sample(c_skip, z_t.shape).astype(z_t.dtype) \
            + out * _per_sample(c_out, z_t.shape).astype(z_t.dtype)


class ToyGenerator(Module):
    """One-step 2-64-64-2 residual map; the zero output layer makes it start as the identity."""

    def __init__(self, rng, hidden=64):
        self.net = MLP([2, hidden, hidden, 2], rng, zero_last=True)

    def __call__(self, y):
        y = ad.as_tensor(y)
        return y + self.net(y)


@dataclass
class ToyConfig:
    steps: int = 5000
    batch: int = 256
    lr_gen: float = 3e-3
    lr_gen_final: float | None = 1e-5
    lr_fake: float = 1e-3
    fake_updates: int = 2
    xi: float = 1.0
    input_scale: float = 0.5
    input_noise: float = 0.15
    t_min: int = 5
    t_max: int = 300
    n_modes: int = 8
    radius: float = 2.0
    mode_std: float = 0.05
    eval_samples: int = 2000


@dataclass
class ToyReport:
    seed: int
    config: dict
    l_id: list = field(default_factory=list)
    l_score: list = field(default_factory=list)
    l_fake: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    aborted: bool = False
    runtime_s: float = 0.0

    def l_id_reduction(self, window=100):
        """Relative drop of the final ``window``-step mean of L_id below its first-``window`` mean."""
        traj = np.asarray(self.l_id)
        start = traj[:window].mean()
        end = traj[-window:].mean()
        return float((start - end) / abs(start))

    def to_json(self):
        return json.dumps({
            "seed": self.seed, "config": self.config, "aborted": self.aborted,
            "runtime_s": self.runtime_s, "final": self.final,
            "l_id_reduction": self.l_id_reduction() if len(self.l_id) else None,
            "l_id": self.l_id, "l_score": self.l_score, "l_fake": self.l_fake,
        }, indent=1)


def toy_distill_demo(seed=0, cfg: ToyConfig = ToyConfig(), w_t: Callable = _unit_weight) -> ToyReport:
    """Distill a one-step 2-D denoiser against an analytic mixture teacher with the CiD objective.

    Inputs are clean mixture samples shrunk toward the origin by
    ``input_scale`` plus Gaussian noise; the clean sample is the anchor z_h. Each step trains the fake score on the current
    generator outputs by denoising, then updates the generator on L_cid.
    """
    from dataclasses import asdict

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    sched = NoiseSchedule()
    teacher = MixtureTeacher(ring_means(cfg.n_modes, cfg.radius), cfg.mode_std, sched)
    gen = ToyGenerator(rng)
    fake = FakeScore(rng, sched)
    opt_g = Adam(gen.parameters())
    opt_f = Adam(fake.parameters())
    report = ToyReport(seed=seed, config=asdict(cfg))
    c = np.zeros((cfg.batch, 1))

    for step in range(cfg.steps):
        x = teacher.sample(rng, cfg.batch)
        y = cfg.input_scale * x + cfg.input_noise * rng.standard_normal(x.shape)

        with ad.no_grad():
            z_g_const = gen(y).data
        for _ in range(cfg.fake_updates):
            t = rng.integers(cfg.t_min, cfg.t_max, cfg.batch)
            eps = rng.standard_normal(x.shape)
            z_t = forward_noise(z_g_const, t, eps, sched)
            pred = fake(z_t, t, c)
            l_fake = ad.mean(ad.tsum((pred - z_g_const) ** 2, axis=1))
            opt_f.zero_grad()
            ad.backward(l_fake)
            opt_f.step(cfg.lr_fake)

        t = rng.integers(cfg.t_min, cfg.t_max, cfg.batch)
        eps = rng.standard_normal(x.shape)
        z_g = gen(y)
        batch = CidBatch(z_h=x, z_t=forward_noise(z_g, t, eps, sched), t=t, epsilon=eps, c=c, z_g=z_g)
        l_id = identity_loss(batch, teacher, fake, w_t)
        l_sc = score_diff_loss(batch, teacher, fake)
        loss = l_id - l_sc * cfg.xi
        vals = (float(l_id.data[0]), float(l_sc.data[0]), float(l_fake.data[0]))
        report.l_id.append(vals[0])
        report.l_score.append(vals[1])
        report.l_fake.append(vals[2])
        if not all(math.isfinite(v) for v in vals):
            report.aborted = True
            break
        opt_g.zero_grad()
        fake.zero_grad()
        ad.backward(loss)
        lr = cfg.lr_gen if cfg.lr_gen_final is None else cosine_lr(step, cfg.steps, cfg.lr_gen, cfg.lr_gen_final)
        opt_g.step(lr)

    ev = np.random.default_rng(seed + 1)
    x = teacher.sample(ev, cfg.eval_samples)
    y = cfg.input_scale * x + cfg.input_noise * ev.standard_normal(x.shape)
    with ad.no_grad():
        out = gen(y).data.astype(np.float64)
    d_out = np.linalg.norm(out[:, None] - teacher.means[None], axis=-1).min(axis=1)
    d_in = np.linalg.norm(y[:, None] - teacher.means[None], axis=-1).min(axis=1)
    report.final = {
        "near_mode_fraction": float(np.mean(d_out < 0.2)),
        "input_near_mode_fraction": float(np.mean(d_in < 0.2)),
        "mean_mode_distance": float(d_out.mean()),
        "mean_anchor_distance": float(np.linalg.norm(out - x, axis=1).mean()),
        "final_l_id": report.l_id[-1] if report.l_id else None,
    }
    report.runtime_s = time.perf_counter() - t0
    return report
