"""Command-line entry point: ``rpprep <subcommand> ...``."""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
import typing
from pathlib import Path

import numpy as np

from .evaluation import DEFAULT_QPS

# Config keys per INI section; [cid] accepts every ToyConfig field.
_TRAIN_KEYS = ("qp_min", "qp_max", "lr_init", "lr_final", "schedule", "steps", "batch", "seed")
_CODEC_KEYS = ("tau", "n_terms", "neighbors")
_LOSS_KEYS = ("w_p", "w1", "w2")


class CliError(Exception):
    """A user-facing failure reported as one line on stderr."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog.split()[-1]}: {message}")


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _convert(raw: str, typ, where):
    raw = raw.strip()
    try:
        if typ is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        # Optional[float]
        if raw.lower() == "none":
            return None
        return float(raw)
    except ValueError:
        raise CliError(f"config {where}: cannot parse {raw!r}") from None


def load_config(path) -> dict:
    """Parse an INI file into {section: {key: value}} with typed values; unknown keys are rejected."""
    from .cid import ToyConfig
    from .preproc import TrainConfig

    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise CliError(f"malformed config {path}: {str(exc).splitlines()[0]}") from None

    train_types = _field_types(TrainConfig)
    allowed = {
        "codec": {k: train_types[k] for k in _CODEC_KEYS},
        "train": {k: train_types[k] for k in _TRAIN_KEYS},
        "loss": {k: train_types[k] for k in _LOSS_KEYS},
        "eval": {"qps": "qps", "label": str},
        "cid": _field_types(ToyConfig),
    }
    out = {name: {} for name in allowed}
    for section in cp.sections():
        if section not in allowed:
            raise CliError(f"config {path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in allowed[section]:
                raise CliError(f"config {path}: unknown key '{key}' in [{section}]")
            typ = allowed[section][key]
            out[section][key] = _parse_qps(raw) if typ == "qps" else _convert(raw, typ, f"[{section}] {key}")
    return out


def _parse_qps(text):
    try:
        qps = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad qp list {text!r}: expected comma-separated integers") from None
    if not qps:
        raise CliError("empty qp list")
    return qps


def _config(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {s: {} for s in
                                                                          ("codec", "train", "loss", "eval", "cid")}


def _need_file(path, what="input"):
    if not Path(path).is_file():
        raise CliError(f"{what} file not found: {path}")


# -- subcommands ------------------------------------------------------------------

def cmd_curate(args):
    from . import data

    if not Path(args.inp).is_dir():
        raise CliError(f"input directory not found: {args.inp}")
    paths = data.list_images(args.inp)
    if not paths:
        raise CliError(f"no .ppm/.pgm images in {args.inp}")
    root = Path(args.out).resolve().parent
    kept, total = [], 0
    for i, path in enumerate(paths):
        img = data.load_image(path)
        if min(img.shape[1:]) < args.size:
            continue
        sub = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        source = os.path.relpath(Path(path).resolve(), root)
        recs = data.extract_patches(img, args.size, args.count, sub, source=source)
        data.score_records(recs, {source: img})
        total += len(recs)
        kept.extend(data.curate(recs, args.threshold))
    data.write_manifest(kept, args.out)
    print(f"kept {len(kept)} of {total} patches from {len(paths)} images -> {args.out}")
    return 0


def cmd_train(args):
    from . import data
    from .entropy import EntropyModel
    from .preproc import PreprocNet, TrainConfig, checkpoint_save, train

    _need_file(args.manifest, "manifest")
    conf = _config(args)
    fields = {**conf["train"], **conf["codec"], **conf["loss"]}
    if args.steps is not None:
        fields["steps"] = args.steps
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        cfg = TrainConfig(**fields)
    except ValueError as exc:
        raise CliError(f"invalid training config: {exc}") from None
    records = data.read_manifest(args.manifest)
    if not records:
        raise CliError(f"manifest {args.manifest} lists no patches")
    patches = data.load_patches(records, root=Path(args.manifest).resolve().parent)
    net, model = PreprocNet(cfg.seed), EntropyModel()

    def log(entry):
        if entry["step"] % args.log_every == 0 or entry["step"] == cfg.steps - 1:
            print(json.dumps(entry), flush=True)

    net, rep = train(net, patches, cfg, model, log=log)
    checkpoint_save(net, model, args.out, dataclasses.asdict(cfg))
    report = args.report or str(args.out) + ".jsonl"
    rep.write_jsonl(report)
    print(f"saved {args.out}; report {report}; skipped {rep.skipped} steps")
    if rep.failed:
        raise CliError(f"training failed: {rep.skipped} of {cfg.steps} steps skipped (non-finite loss)")
    return 0


def cmd_encode(args):
    from . import codec, data

    _need_file(args.inp)
    img = data.load_image(args.inp)
    if not 0 <= args.qp <= 51:
        raise CliError(f"qp must be in [0, 51], got {args.qp}")
    bits = codec.encode_hard(img, args.qp, embed_model=args.embed_model)
    Path(args.out).write_bytes(bits)
    print(f"{len(bits)} bytes, {8 * len(bits) / (img.shape[1] * img.shape[2]):.4f} bpp -> {args.out}")
    return 0


def cmd_decode(args):
    from . import codec, data

    _need_file(args.inp)
    img = codec.decode_hard(Path(args.inp).read_bytes())
    data.save_image(img, args.out)
    return 0


def cmd_preprocess(args):
    from . import data
    from .preproc import apply_array, checkpoint_load

    _need_file(args.ckpt, "checkpoint")
    _need_file(args.inp)
    net, _, _ = checkpoint_load(args.ckpt)
    img = data.load_image(args.inp)
    if img.shape[0] != 3:
        raise CliError("preprocess needs an RGB (P6) image")
    data.save_image(data.quantize8(apply_array(net, img)), args.out)
    return 0


def cmd_sweep(args):
    from . import data
    from .evaluation import sweep, write_curves_csv
    from .preproc import checkpoint_load

    conf = _config(args)["eval"]
    qps = _parse_qps(args.qps) if args.qps is not None else conf.get("qps", list(DEFAULT_QPS))
    if not Path(args.inp).is_dir():
        raise CliError(f"input directory not found: {args.inp}")
    paths = data.list_images(args.inp)
    if not paths:
        raise CliError(f"no .ppm/.pgm images in {args.inp}")
    images = [data.load_image(p) for p in paths]
    net = None
    if args.ckpt:
        _need_file(args.ckpt, "checkpoint")
        net = checkpoint_load(args.ckpt)[0]
    label = args.label or conf.get("label") or ("preprocessed" if net is not None else "anchor")
    curve = sweep(images, qps, net=net, label=label)
    write_curves_csv([curve], args.out)
    print(f"{len(images)} images x {len(qps)} qps -> {args.out}")
    return 0


def _single_curve(path):
    from .evaluation import read_curves_csv

    _need_file(path, "curve")
    curves = read_curves_csv(path)
    if len(curves) != 1:
        raise CliError(f"{path} holds {len(curves)} curves; expected exactly one")
    return curves[0]


def cmd_bdrate(args):
    from .evaluation import bd_rate, write_bdrate_json

    anchor, test = _single_curve(args.anchor), _single_curve(args.test)
    higher_better = not args.lower_better if args.lower_better is not None else args.metric == "psnr"
    if anchor.label == test.label:
        test.label = test.label + " (test)"
    res = bd_rate(anchor, test, args.metric, higher_better)
    write_bdrate_json([res], args.out)
    print(f"BD-rate ({args.metric}): {res.percent:.4f}%")
    return 0


def cmd_cid_demo(args):
    from .cid import ToyConfig, toy_distill_demo

    conf = _config(args)["cid"]
    if args.steps is not None:
        conf["steps"] = args.steps
    cfg = ToyConfig(**conf)
    rep = toy_distill_demo(args.seed, cfg)
    Path(args.out).write_text(rep.to_json() + "\n")
    print(f"L_id reduction {rep.l_id_reduction():.3f}, near-mode fraction "
          f"{rep.final.get('near_mode_fraction', float('nan')):.3f}, {rep.runtime_s:.1f}s -> {args.out}")
    if rep.aborted:
        raise CliError("cid demo aborted on a non-finite loss")
    return 0


def cmd_verify(args):
    from . import verify

    results = verify.run(args.suite, seed=args.seed)
    return sum(not r.passed for r in results)


# -- parser -----------------------------------------------------------------------


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="rpprep", description="Rate-perception preprocessing toolkit.", formatter_class=fmt)
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads; 1 gives bit-exact runs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    sp = add("curate", cmd_curate, "Extract random patches and keep those above the texture-masking threshold.")
    sp.add_argument("--in", dest="inp", required=True, help="directory of .ppm/.pgm images")
    sp.add_argument("--out", required=True, help="output manifest (JSON lines)")
    sp.add_argument("--size", type=int, default=64, help="patch side in pixels")
    sp.add_argument("--count", type=int, default=50, help="candidate patches per image")
    sp.add_argument("--threshold", type=float, default=0.8, help="keep patches scoring strictly above this")
    sp.add_argument("--seed", type=int, default=0, help="random seed")

    sp = add("train", cmd_train, "Train the preprocessing net through the differentiable codec.")
    sp.add_argument("--manifest", required=True, help="curated patch manifest")
    sp.add_argument("--config", default=None, help="INI config with [train], [codec], [loss] sections")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--steps", type=int, default=None, help="training steps (config or 3000 when omitted)")
    sp.add_argument("--seed", type=int, default=None, help="random seed (config or 0 when omitted)")
    sp.add_argument("--report", default=None, help="run report path (default: <out>.jsonl)")
    sp.add_argument("--log-every", type=int, default=100, help="print a loss line every this many steps")

    sp = add("encode", cmd_encode, "Encode a PPM/PGM image with the block codec.")
    sp.add_argument("--in", dest="inp", required=True, help="input image")
    sp.add_argument("--qp", type=int, required=True, help="quantization parameter in [0, 51]")
    sp.add_argument("--out", required=True, help="output bitstream")
    sp.add_argument("--embed-model", action="store_true", default=False,
                    help="store the entropy-model scales in the bitstream")

    sp = add("decode", cmd_decode, "Decode a bitstream to a PPM/PGM image.")
    sp.add_argument("--in", dest="inp", required=True, help="input bitstream")
    sp.add_argument("--out", required=True, help="output image")

    sp = add("preprocess", cmd_preprocess, "Apply a trained preprocessing net to an image.")
    sp.add_argument("--ckpt", required=True, help="checkpoint from train")
    sp.add_argument("--in", dest="inp", required=True, help="input PPM image")
    sp.add_argument("--out", required=True, help="output PPM image")

    sp = add("sweep", cmd_sweep, "Code a directory of images at several QPs and write the rate-quality curve.")
    sp.add_argument("--in", dest="inp", required=True, help="directory of .ppm/.pgm images")
    sp.add_argument("--qps", default=None, help="comma-separated QPs (default %s)" % ",".join(map(str, DEFAULT_QPS)))
    sp.add_argument("--ckpt", default=None, help="preprocess with this checkpoint before coding")
    sp.add_argument("--label", default=None, help="curve label (default: anchor or preprocessed)")
    sp.add_argument("--config", default=None, help="INI config with an [eval] section")
    sp.add_argument("--out", required=True, help="output CSV")

    sp = add("bdrate", cmd_bdrate, "Bjontegaard delta rate of a test curve against an anchor curve.")
    sp.add_argument("--anchor", required=True, help="anchor curve CSV")
    sp.add_argument("--test", required=True, help="test curve CSV")
    sp.add_argument("--metric", choices=("psnr", "pproxy"), default="psnr", help="quality metric")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--lower-better", dest="lower_better", action="store_true", default=None,
                   help="metric improves downward (default for pproxy)")
    g.add_argument("--higher-better", dest="lower_better", action="store_false",
                   help="metric improves upward (default for psnr)")
    sp.add_argument("--out", required=True, help="output JSON")

    sp = add("cid-demo", cmd_cid_demo, "Run the two-dimensional score-identity distillation demo.")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--steps", type=int, default=None, help="generator steps (config or 5000 when omitted)")
    sp.add_argument("--config", default=None, help="INI config with a [cid] section")
    sp.add_argument("--out", required=True, help="output JSON report")

    sp = add("verify", cmd_verify, "Run the self-check suites; the exit code is the number of failed checks.")
    sp.add_argument("--suite", choices=("gradients", "codec", "entropy", "all"), default="all", help="suite")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    return p


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .data import ImageFormatError
    from .entropy import BitstreamError
    from .evaluation import SweepError
    from .preproc import CheckpointError

    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return int(args.func(args))
    except CliError as exc:
        msg = str(exc)
    except (ImageFormatError, BitstreamError, CheckpointError, SweepError, ValueError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
    except OSError as exc:
        msg = f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
    print("rpprep: error: " + " ".join(msg.split()), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
