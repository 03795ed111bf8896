"""QP sweeps through the exact codec, rate-quality curves and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial

from . import autodiff as ad
from .codec import decode_hard, encode_hard
from .data import quantize8
from .entropy import EntropyModel
from .losses import perceptual_proxy

DEFAULT_QPS = (16, 22, 28, 34, 40, 46)
CSV_COLUMNS = ("label", "qp", "bpp", "psnr", "pproxy")
METRICS = ("psnr", "pproxy")


@dataclass
class RPPoint:
    qp: int
    bpp: float
    metrics: dict


@dataclass
class RPCurve:
    label: str
    points: list

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        rates = [p.bpp for p in self.points]
        for a, b in zip(rates, rates[1:]):
            if not b > a:
                raise ValueError(f"curve {self.label!r}: bpp values must be distinct, got a tie at {a}")
        if any(not r > 0 for r in rates):
            raise ValueError(f"curve {self.label!r}: bpp must be positive")

    def column(self, key):
        if key == "bpp":
            return np.array([p.bpp for p in self.points])
        return np.array([p.metrics[key] for p in self.points])


class SweepError(RuntimeError):
    pass


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def pproxy(a, b) -> float:
    with ad.no_grad(), ad.precision(np.float64):
        return float(perceptual_proxy(np.asarray(a, np.float64), np.asarray(b, np.float64)).data[0])


def sweep(images, qps=DEFAULT_QPS, net=None, label="anchor", model: EntropyModel | None = None) -> RPCurve:
    """Code every image at every QP and average rate and quality per QP.

    With a net, its output is rounded to 8 bits before coding; quality is
    always measured against the original image.
    """
    from .preproc import apply_array

    qps = [int(q) for q in qps]
    if len(set(qps)) != len(qps) or any(not 0 <= q <= 51 for q in qps):
        raise ValueError("qps must be distinct integers in [0, 51]")
    images = list(images)
    if not images:
        raise ValueError("sweep needs at least one image")
    model = model if model is not None else EntropyModel()
    inputs = [quantize8(apply_array(net, im)) if net is not None else np.asarray(im, dtype=np.float64)
              for im in images]
    points = []
    for qp in sorted(qps):
        bpp, ps, pp = [], [], []
        for i, (orig, x) in enumerate(zip(images, inputs)):
            try:
                data = encode_hard(x, qp, model)
                dec = decode_hard(data, model)
            except Exception as exc:  # noqa: BLE001 - rethrown with the image id
                raise SweepError(f"image {i} at qp {qp}: {exc}") from exc
            h, w = np.shape(orig)[-2:]
            bpp.append(len(data) * 8.0 / (h * w))
            ps.append(psnr(orig, dec))
            pp.append(pproxy(orig, dec))
        points.append(RPPoint(qp, float(np.mean(bpp)), {"psnr": float(np.mean(ps)), "pproxy": float(np.mean(pp))}))
    return RPCurve(label, points)


# -- Bjontegaard delta rate -------------------------------------------------------

@dataclass
class BDRateResult:
    percent: float
    avg_log_diff: float
    overlap: tuple
    overlap_width: float
    residuals: dict = field(default_factory=dict)
    metric: str = ""
    anchor: str = ""
    test: str = ""


def _prepared(curve: RPCurve, metric, higher_better):
    if len(curve.points) < 4:
        raise ValueError(f"curve {curve.label!r} has {len(curve.points)} points, need >= 4")
    q = curve.column(metric).astype(np.float64)
    if not higher_better:
        q = -q
    r = np.log10(curve.column("bpp"))
    bad = [(curve.points[i].bpp, curve.points[i].metrics[metric])
           for i in range(1, len(q)) if not q[i] > q[i - 1]]
    if bad:
        raise ValueError(f"curve {curve.label!r}: quality is not monotone in rate at (bpp, {metric}) {bad}")
    return q, r


def bd_rate(anchor: RPCurve, test: RPCurve, metric="psnr", higher_better=True) -> BDRateResult:
    """Average rate difference at equal quality from cubic fits of log10(bpp) against quality."""
    qa, ra = _prepared(anchor, metric, higher_better)
    qt, rt = _prepared(test, metric, higher_better)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError(f"no overlapping {metric} range between {anchor.label!r} and {test.label!r}")
    fa = Polynomial.fit(qa, ra, 3)
    ft = Polynomial.fit(qt, rt, 3)
    ia, it = fa.integ(), ft.integ()
    avg = ((it(hi) - it(lo)) - (ia(hi) - ia(lo))) / (hi - lo)
    residuals = {
        anchor.label: float(np.sqrt(np.mean((fa(qa) - ra) ** 2))),
        test.label: float(np.sqrt(np.mean((ft(qt) - rt) ** 2))),
    }
    return BDRateResult(
        percent=float((10.0 ** avg - 1.0) * 100.0),
        avg_log_diff=float(avg),
        overlap=(float(lo), float(hi)) if higher_better else (float(-hi), float(-lo)),
        overlap_width=float(hi - lo),
        residuals=residuals,
        metric=metric,
        anchor=anchor.label,
        test=test.label,
    )


# -- files ------------------------------------------------------------------------

def _fmt(v):
    return f"{v:.9g}"


def write_curves_csv(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in curves:
            for p in sorted(c.points, key=lambda p: p.qp):
                w.writerow([c.label, p.qp, _fmt(p.bpp)] + [_fmt(p.metrics[m]) for m in METRICS])


def read_curves_csv(path) -> list:
    groups: dict = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        if tuple(rows.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for row in rows:
            pt = RPPoint(int(row["qp"]), float(row["bpp"]), {m: float(row[m]) for m in METRICS})
            groups.setdefault(row["label"], []).append(pt)
    return [RPCurve(label, pts) for label, pts in groups.items()]


def write_bdrate_json(results, path):
    payload = {"bdrates": [asdict(r) for r in results]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def report(curves, bdrates, directory):
    """Write ``curves.csv`` and ``bdrate.json`` into ``directory``; returns both paths."""
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"{directory} is not a writable directory")
    csv_path, json_path = d / "curves.csv", d / "bdrate.json"
    write_curves_csv(curves, csv_path)
    write_bdrate_json(bdrates, json_path)
    return csv_path, json_path
