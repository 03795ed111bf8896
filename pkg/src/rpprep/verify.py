"""Self-check suites behind ``rpprep verify``: gradients, codec integrity and entropy coding."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import codec, entropy
from .losses import perceptual_proxy, total_loss

OP_EPS = 1e-3
TOL32, TOL64 = 1e-3, 1e-6
# The full chain is piecewise smooth (L1, leaky ReLU, clamps, 8-bit neighbours),
# so it is probed with small steps and the median over a three-step ladder.
CHAIN_EPS = 1e-5
CHAIN_LADDER = 3
# Floors of the relative-error denominator: a coordinate whose gradient is
# below the floor is judged on absolute error tol * floor (1e-5 in 32-bit,
# 1e-9 in 64-bit), as in common gradcheck tools.
CHAIN_FLOOR32, CHAIN_FLOOR64 = 1e-2, 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


def _op_cases(rng):
    """(name, function of one Tensor, input shape) for every differentiable primitive."""
    w22 = rng.uniform(-2, 2, (4, 3))
    k = rng.uniform(-1, 1, (2, 3, 3, 3))
    bias = rng.uniform(-1, 1, 2)
    cond = rng.random((3, 4)) > 0.5
    return [
        ("add", lambda t: ad.tsum((t + t * 0.5) * t), (3, 4)),
        ("sub", lambda t: ad.tsum((t - 1.5) * t), (3, 4)),
        ("mul", lambda t: ad.tsum(t * t * t), (3, 4)),
        ("div", lambda t: ad.tsum(t / (t * t + 1.0)), (3, 4)),
        ("neg", lambda t: ad.tsum(-t * t), (3, 4)),
        ("abs", lambda t: ad.tsum(ad.tabs(t) * t), (3, 4)),
        ("exp", lambda t: ad.tsum(ad.exp(t)), (3, 4)),
        ("log", lambda t: ad.tsum(ad.log(t * t + 0.5)), (3, 4)),
        ("sin", lambda t: ad.tsum(ad.sin(t * 2.0)), (3, 4)),
        ("cos", lambda t: ad.tsum(ad.cos(t * 2.0)), (3, 4)),
        ("power", lambda t: ad.tsum(ad.power(t * t + 0.5, 1.5)), (3, 4)),
        ("sqrt", lambda t: ad.tsum(ad.sqrt(t * t + 0.5)), (3, 4)),
        ("clamp", lambda t: ad.tsum(ad.clamp(t, -1.0, 1.0) * t), (3, 4)),
        ("leaky_relu", lambda t: ad.tsum(ad.leaky_relu(t, 0.2) * t), (3, 4)),
        ("where", lambda t: ad.tsum(ad.where(cond, t * t, ad.sin(t))), (3, 4)),
        ("sum_axis", lambda t: ad.tsum(ad.tsum(t, axis=1) ** 2), (3, 4)),
        ("mean", lambda t: ad.tsum(ad.mean(t, axis=0) ** 2), (3, 4)),
        ("reshape_transpose", lambda t: ad.tsum(ad.transpose(ad.reshape(t, (4, 3))) * w22.T), (3, 4)),
        ("getitem", lambda t: ad.tsum(ad.getitem(t, (slice(None), [0, 2, 2])) ** 2), (3, 4)),
        ("broadcast_to", lambda t: ad.tsum(ad.broadcast_to(ad.reshape(t, (1, 3, 4)), (2, 3, 4)) ** 3), (3, 4)),
        ("stack_concat", lambda t: ad.tsum(ad.concat([ad.stack([t, t * t]), t.reshape(1, 3, 4)]) ** 2), (3, 4)),
        ("matmul", lambda t: ad.tsum(ad.matmul(t, w22) ** 2), (3, 4)),
        ("softmax", lambda t: ad.tsum(ad.softmax(t, axis=-1) * w22.T[:, :4][:3]), (3, 4)),
        ("conv2d", lambda t: ad.tsum(ad.conv2d(t, k, bias, padding=1) ** 2), (1, 3, 5, 5)),
        ("soft_round", lambda t: ad.tsum(codec.soft_round(t, 5) * t), (3, 4)),
        ("bits_estimate", lambda t: entropy.bits_estimate(
            ad.reshape(ad.concat([t, t]) * 3.0, (1, 64)), entropy.EntropyModel(dtype=t.dtype)), (4, 8)),
        ("perceptual_proxy", lambda t: perceptual_proxy(t * 0.25 + 0.5, np.full((1, 16, 16), 0.45)), (1, 16, 16)),
    ]


def _chain(mode, qp=30, seed=0):
    from .preproc import PreprocNet, apply

    net = PreprocNet(seed)
    rng = np.random.default_rng(seed + 1)
    net.conv3.weight.data[:] = rng.normal(0, 0.05, net.conv3.weight.shape)
    ref = rng.random((3, 16, 16))

    def f(t):
        pre = apply(net, t)
        rec, bpp = codec.forward_diff(pre, qp, 0.1, 5, neighbors=mode)
        return total_loss(ref, rec, bpp, qp)[0]

    return f, rng.random((3, 16, 16))


def suite_gradients(seed=0):
    out = []
    rng = np.random.default_rng(seed)
    for name, f, shape in _op_cases(rng):
        x = rng.uniform(-2, 2, shape)
        r32 = ad.grad_check(f, x.astype(np.float32), eps=OP_EPS, tol=TOL32, richardson=True)
        with ad.precision(np.float64):
            r64 = ad.grad_check(f, x, eps=OP_EPS, tol=TOL64, richardson=True)
        out.append(CheckResult("gradients", f"op:{name}", r32.passed and r64.passed,
                               f"32-bit {r32.max_rel_error:.2e}, 64-bit {r64.max_rel_error:.2e}"))
    for mode in ("hard", "recon", "source"):
        f, x = _chain(mode, seed=seed)
        kw = dict(eps=CHAIN_EPS, n_coords=20, seed=seed, richardson=True, ladder=CHAIN_LADDER)
        r32 = ad.grad_check(f, x.astype(np.float32), tol=TOL32, floor=CHAIN_FLOOR32, **kw)
        with ad.precision(np.float64):
            r64 = ad.grad_check(f, x, tol=TOL64, floor=CHAIN_FLOOR64, **kw)
        out.append(CheckResult("gradients", f"chain:{mode}", r32.passed and r64.passed,
                               f"apply->forward_diff->total_loss 16x16: 32-bit {r32.max_rel_error:.2e}, "
                               f"64-bit {r64.max_rel_error:.2e}"))
    return out


def suite_codec(seed=0, count=200):
    rng = np.random.default_rng(seed)
    failures = 0
    for i in range(count):
        c = 3 if rng.random() < 0.8 else 1
        h, w = (int(v) for v in rng.integers(1, 40, 2))
        img = np.round(rng.random((c, h, w)) * 255) / 255
        qp = int(rng.integers(0, 52))
        res = codec.encode_hard_detailed(img, qp, embed_model=bool(i % 2))
        dec = codec.decode_hard(res.bitstream)
        if dec.shape != img.shape or not np.array_equal(dec, res.reconstruction):
            failures += 1
    out = [CheckResult("codec", "roundtrip", failures == 0, f"{count - failures}/{count} bit-exact decodes")]
    data = codec.encode_hard(rng.random((3, 16, 16)), 30)
    rejected = 0
    for cut in range(1, len(data)):
        try:
            codec.decode_hard(data[:cut])
        except (entropy.BitstreamError, ValueError):
            rejected += 1
    out.append(CheckResult("codec", "truncation", rejected == len(data) - 1,
                           f"{rejected}/{len(data) - 1} truncated streams rejected"))
    return out


def suite_entropy(seed=0):
    from .data import synthetic_image

    rng = np.random.default_rng(seed)
    out = []
    scales = np.exp(rng.uniform(np.log(0.3), np.log(30.0), 64))
    table = entropy.CodingTable.from_scales(scales)
    bands = rng.integers(0, 64, 5000)
    sym = np.round(rng.laplace(0, scales[bands])).astype(int)
    sym[:3] = [3000, -32768, 32767]
    data = entropy.range_encode(sym.tolist(), bands.tolist(), table)
    back = entropy.range_decode(data, len(sym), bands.tolist(), table)
    out.append(CheckResult("entropy", "range_roundtrip", back == sym.tolist(),
                           f"{len(sym)} symbols in {len(data)} bytes"))

    imgs = [synthetic_image(np.random.default_rng(seed + i), 64, 64) for i in range(8)]
    model = entropy.EntropyModel()
    # Synthetic textures skip many all-zero blocks above qp 28, which the
    # per-coefficient estimate does not model; natural images stay closer.
    qps = (16, 22, 28)
    levels, qsteps = [], []
    for qp in qps:
        q = codec.qstep_from_qp(qp)
        levels.append(np.concatenate([codec._encode_planes(im, q)[1].reshape(-1, 64) for im in imgs]))
        qsteps.append(q.qstep)
    entropy.fit(model, levels, qsteps, steps=200, lr=2e-2)
    worst = 0.0
    for qp, lv, qs in zip(qps, levels, qsteps):
        est = float(entropy.bits_estimate(lv.astype(np.float32), model, qs).data[0])
        real = sum(8 * len(codec.Bitstream.from_bytes(codec.encode_hard(im, qp, model)).payload) for im in imgs)
        worst = max(worst, abs(est - real) / real)
    out.append(CheckResult("entropy", "estimate_vs_real", worst <= 0.05, f"max relative gap {worst:.2%}"))
    return out


SUITES = {"gradients": suite_gradients, "codec": suite_codec, "entropy": suite_entropy}


def run(suite="all", seed=0, echo=print):
    names = list(SUITES) if suite == "all" else [suite]
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name](seed=seed)
        for r in res:
            echo(r.line())
        echo(f"{name}: {sum(r.passed for r in res)}/{len(res)} passed in {time.perf_counter() - t0:.1f}s")
        results.extend(res)
    return results
