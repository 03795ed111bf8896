"""Residual preprocessing network and its rate-perception training loop."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .codec import forward_diff
from .entropy import EntropyModel
from .losses import LossWeights, total_loss
from .nn import Adam, Conv2d, Module, cosine_lr

CKPT_MAGIC = b"RPPN"
CKPT_VERSION = 1
MAX_SKIP_FRACTION = 0.01


class PreprocNet(Module):
    """conv3x3(3->32) -> leaky -> conv3x3(32->32) -> leaky -> conv3x3(32->3), added to the input.

    The last layer starts at zero, so a fresh network is the identity.
    """

    def __init__(self, seed=0, width=32, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.width = width
        self.conv1 = Conv2d(3, width, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, rng, dtype=dtype)
        self.conv3 = Conv2d(width, 3, 3, rng, zero=True, dtype=dtype)

    def __call__(self, x):
        h = ad.leaky_relu(self.conv1(x), 0.2)
        h = ad.leaky_relu(self.conv2(h), 0.2)
        return ad.clamp(x + self.conv3(h), 0.0, 1.0)


def apply(net: PreprocNet, image):
    """Run the net on (C, H, W) or (N, C, H, W) input; returns a Tensor of the same shape."""
    x = ad.as_tensor(image)
    if x.ndim == 3:
        return net(x.reshape((1,) + x.shape)).reshape(x.shape)
    return net(x)


def apply_array(net: PreprocNet, image) -> np.ndarray:
    with ad.no_grad():
        return apply(net, np.asarray(image, dtype=net.conv1.weight.dtype)).data


@dataclass
class TrainConfig:
    qp_min: int = 10
    qp_max: int = 50
    lr_init: float = 1e-3
    lr_final: float = 1e-8
    schedule: str = "cosine"
    steps: int = 3000
    batch: int = 8
    tau: float = 0.1
    n_terms: int = 5
    w_p: float = 1.0
    w1: float = -0.115
    w2: float = 1.145
    seed: int = 0
    neighbors: str = "hard"

    def __post_init__(self):
        if not 0 <= self.qp_min <= self.qp_max <= 51:
            raise ValueError("qp range must lie within [0, 51]")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is implemented")
        if self.steps < 1 or self.batch < 1 or self.n_terms < 1 or self.tau <= 0:
            raise ValueError("steps, batch, n_terms must be >= 1 and tau > 0")


@dataclass
class RunReport:
    config: dict
    num_parameters: int
    steps: list = field(default_factory=list)
    skipped: int = 0
    failed: bool = False

    def totals(self):
        return np.array([s["total"] for s in self.steps if not s["skipped"]])

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"config": self.config, "num_parameters": self.num_parameters}) + "\n")
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")
            fh.write(json.dumps({"skipped": self.skipped, "failed": self.failed}) + "\n")


def _grads_finite(params):
    return all(p.grad is None or np.isfinite(p.grad).all() for p in params)


def train(net: PreprocNet, dataset, cfg: TrainConfig = TrainConfig(), model: EntropyModel | None = None,
          log=None):
    """Jointly fit the net and the entropy model on (N, 3, H, W) patches.

    Each step draws a batch without replacement and one integer QP, runs the
    net, the differentiable codec and the loss, and takes one Adam step on
    all parameters. Steps whose loss or gradient is not finite are skipped
    and counted; more than 1% skipped marks the run as failed.
    """
    data = np.asarray(dataset)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (N, C, H, W) array")
    model = model if model is not None else EntropyModel()
    weights = LossWeights(w_p=cfg.w_p, w1=cfg.w1, w2=cfg.w2)
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters() + model.parameters()
    opt = Adam(params)
    report = RunReport(config=asdict(cfg), num_parameters=net.num_parameters())
    dtype = net.conv1.weight.dtype

    for step in range(cfg.steps):
        idx = rng.choice(len(data), size=min(cfg.batch, len(data)), replace=False)
        qp = int(rng.integers(cfg.qp_min, cfg.qp_max + 1))
        lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final)
        x = data[np.sort(idx)].astype(dtype)

        opt.zero_grad()
        pre = apply(net, x)
        rec, bpp = forward_diff(pre, qp, cfg.tau, cfg.n_terms, model, neighbors=cfg.neighbors)
        loss, rep = total_loss(x, rec, bpp, qp, weights)
        entry = {"step": step, "qp": qp, "lr": lr, **rep.to_dict(), "skipped": False}
        if math.isfinite(rep.total) and not loss.nonfinite:
            ad.backward(loss)
        if not (math.isfinite(rep.total) and _grads_finite(params)):
            entry["skipped"] = True
            report.skipped += 1
            opt.zero_grad()
        else:
            opt.step(lr)
        report.steps.append(entry)
        if log is not None:
            log(entry)

    report.failed = report.skipped > MAX_SKIP_FRACTION * cfg.steps
    return net, report


# -- checkpoints ----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def checkpoint_save(net: PreprocNet, model: EntropyModel | None, path, config=None):
    params = net.parameters() + (model.parameters() if model is not None else [])
    header = {
        "format": "rppn",
        "width": net.width,
        "has_entropy_model": model is not None,
        "shapes": [list(p.shape) for p in params],
        "config": config if config is not None else {},
        "seed": (config or {}).get("seed"),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params)
    Path(path).write_bytes(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(blob)) + blob + payload)


def checkpoint_load(path):
    """Returns (net, entropy model or None, header dict)."""
    buf = Path(path).read_bytes()
    if len(buf) < 9 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a preprocessing checkpoint (bad magic)")
    if buf[4] != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {buf[4]}")
    (n,) = struct.unpack_from("<I", buf, 5)
    if 9 + n > len(buf):
        raise CheckpointError(f"{path}: truncated header ({len(buf) - 9} of {n} bytes)")
    try:
        header = json.loads(buf[9:9 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    net = PreprocNet(width=header["width"])
    model = EntropyModel() if header["has_entropy_model"] else None
    params = net.parameters() + (model.parameters() if model is not None else [])
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != [p.shape for p in params]:
        raise CheckpointError(f"{path}: parameter shapes do not match the architecture")
    need = sum(int(np.prod(s)) for s in shapes) * 4
    payload = buf[9 + n:]
    if len(payload) != need:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    off = 0
    for p in params:
        k = p.size * 4
        p.data = np.frombuffer(payload, dtype="<f4", count=p.size, offset=off).reshape(p.shape).astype(np.float32)
        off += k
    return net, model, header
