"""Command-line entry point: ``deblur-mim <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad usage (unknown flag),
3 config/schema violation, 4 missing input file.  Failures print one line
``error: <kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import PRESETS, RunConfig, SchemaError, config_from_mapping
from .data import DataError, SynthSpec, load_dataset, load_image, save_image, synth_speckle, write_dataset
from .degrade import DegradeError, DegradeSpec, apply
from .model import CheckpointError, load_checkpoint

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_MISSING = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _parse_value(text: str):
    val = yaml.safe_load(text)
    return val if isinstance(val, (int, float, bool, str)) else text


def _params(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, val = pair.partition("=")
        if not sep or not key:
            raise SchemaError(f"--param expects k=v, got {pair!r}")
        out[key] = _parse_value(val)
    return out


def _run_config(args, mode: str) -> RunConfig:
    """File values, then flag overrides, validated once as a whole."""
    path = _require(args.config)
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be a mapping")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None):
        raw["ckpt_out"] = args.out
    if getattr(args, "metrics", None):
        raw["metrics_out"] = args.metrics
    if getattr(args, "scratch", False):
        raw["scratch"] = True
        raw["ckpt_in"] = None
    elif getattr(args, "ckpt", None):
        _require(args.ckpt)
        raw["ckpt_in"] = args.ckpt
        raw["scratch"] = False
    cfg = config_from_mapping(raw, str(path))
    if cfg.mode != mode:
        raise SchemaError(f"config mode is {cfg.mode!r} but the subcommand is {mode!r}")
    return cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    raw = yaml.safe_load(_require(args.spec).read_text()) or {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{args.spec}: top level must be a mapping")
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from exc
    ds = synth_speckle(spec)
    write_dataset(ds, args.out)
    _print_json({"count": len(ds), "out": str(args.out)})


def cmd_degrade(args) -> None:
    try:
        spec = DegradeSpec.make(args.method, **_params(args.param))
    except (TypeError, DegradeError) as exc:
        raise SchemaError(str(exc)) from exc
    src = _require(args.inp)
    if spec.method == "identity":
        # lossless passthrough: identical bytes out
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(src.read_bytes())
        return
    img = load_image(src)
    save_image(apply(spec, img, np.random.default_rng(args.seed)), args.out)


def cmd_pretrain(args) -> None:
    from .train import pretrain
    res = pretrain(_run_config(args, "pretrain"))
    _print_json({"epochs": len(res.trace), "final_loss": res.trace[-1]["loss"]})


def cmd_finetune(args) -> None:
    from .train import finetune
    res = finetune(_run_config(args, "finetune"))
    _print_json(res.test)


def cmd_linprobe(args) -> None:
    from .train import linear_probe
    res = linear_probe(_run_config(args, "linprobe"))
    _print_json(res.test)


def cmd_eval(args) -> None:
    from .train import evaluate
    w, meta = load_checkpoint(_require(args.ckpt))
    ds = load_dataset(_require(args.data))
    _print_json(evaluate(w, meta, ds, args.report, seed=args.seed))


def cmd_reconstruct(args) -> None:
    from .train import reconstruct_report
    w, meta = load_checkpoint(_require(args.ckpt))
    ds = load_dataset(_require(args.data))
    rep = reconstruct_report(w, meta, ds, args.out, args.mask_ratio, seed=args.seed)
    _print_json({k: v for k, v in rep.items() if k != "images"})


def load_sweep_config(path) -> tuple[RunConfig, RunConfig, list]:
    raw = yaml.safe_load(_require(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {"pretrain", "finetune", "seeds"}
    if unknown:
        raise SchemaError(f"{path}: unknown key(s) {sorted(unknown)}")
    parts = []
    for key in ("pretrain", "finetune"):
        sub = raw.get(key)
        if not isinstance(sub, dict):
            raise SchemaError(f"{path}: '{key}' must be a mapping")
        if sub.get("mode", PRESETS.get(sub.get("preset"), {}).get("mode")) == "finetune":
            sub = {"scratch": True, **sub}  # weights come from the paired pretrain run
        parts.append(config_from_mapping(sub, f"{path}:{key}"))
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds) or not seeds:
        raise SchemaError(f"{path}: seeds must be a non-empty list of integers")
    pre, ft = parts
    if pre.mode != "pretrain" or ft.mode != "finetune":
        raise SchemaError(f"{path}: sections must have modes pretrain and finetune")
    return pre, ft, seeds


def cmd_sweep(args) -> None:
    from .train import format_table, run_sweep, summarize
    pre, ft, seeds = load_sweep_config(args.config)
    if args.seed is not None:
        seeds = [args.seed]
    values = [_parse_value(v) for v in args.values.split(",") if v != ""]
    if not values:
        raise SchemaError("--values is empty")
    rows = run_sweep(pre, ft, args.axis, values, seeds)
    table = summarize(rows)
    text = format_table(table)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deblur-mim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic speckle corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("degrade", help="apply one degradation operator to an image")
    s.add_argument("--method", required=True, choices=sorted(
        ["gaussian", "srad", "mean", "median", "motion", "defocus", "noise", "identity"]))
    s.add_argument("--param", action="append", metavar="K=V")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("pretrain", help="masked (deblurring) pretraining")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--metrics")
    s.set_defaults(fn=cmd_pretrain)

    for name, fn, helptext in (("finetune", cmd_finetune, "end-to-end fine-tuning"),
                               ("linprobe", cmd_linprobe, "linear probing of a frozen encoder")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        if name == "finetune":
            s.add_argument("--ckpt")
            s.add_argument("--scratch", action="store_true")
        else:
            s.add_argument("--ckpt", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--metrics")
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", help="ACC/F1/AUROC of a checkpoint on a labeled directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("reconstruct", help="reconstruction grids plus MSE report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("sweep", help="ablation grid: pretrain + fine-tune per value")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["mask_ratio", "patch_size", "sigma", "method"])
    s.add_argument("--values", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)
    return p


def _fail(kind: str, code: int, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (SchemaError, yaml.YAMLError) as exc:
        return _fail("schema", EXIT_SCHEMA, exc)
    except FileNotFoundError as exc:
        return _fail("missing", EXIT_MISSING, exc)
    except (DataError, DegradeError, CheckpointError, ValueError, RuntimeError, OSError) as exc:
        return _fail(type(exc).__name__, EXIT_RUNTIME, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
