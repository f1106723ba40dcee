"""Command-line entry point: gen, train, eval, sweep, report.

Config files hold ``key=value`` lines for run and dataset settings alike;
``--set key=value`` flags override the file. Failures exit nonzero with a
single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint, objective, pipeline, recovery, retrieval, synth
from .config import RunConfig, apply_overrides, parse_kv_lines
from .descriptor import PART_NAMES, read_pfv

log = logging.getLogger("occluded_reid")

_RUN_KEYS = {f.name for f in fields(RunConfig)}
_SYNTH_KEYS = {f.name for f in fields(synth.SynthConfig)}
# settings fixed by the checkpoint's parameter shapes
_MODEL_KEYS = ("c", "gcn_layers", "steps", "frt_layers", "frt_hidden")


class UsageError(ValueError):
    pass


def _gather(args) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_kv_lines(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = val.strip()
    unknown = sorted(set(values) - _RUN_KEYS - _SYNTH_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    return values


def run_config(args) -> RunConfig:
    values = _gather(args)
    return apply_overrides(RunConfig(), {k: v for k, v in values.items() if k in _RUN_KEYS})


def synth_config(args) -> synth.SynthConfig:
    values = _gather(args)
    return apply_overrides(synth.SynthConfig(), {k: v for k, v in values.items() if k in _SYNTH_KEYS})


def for_model(cfg: RunConfig, model: objective.Model) -> RunConfig:
    return cfg.replace(**{k: int(model.meta[k]) for k in _MODEL_KEYS if k in model.meta})


def load_split(data_dir, split: str, cfg: RunConfig):
    path = Path(data_dir) / f"{split}.pfv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return read_pfv(path, cfg.region_map())


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    scfg = synth_config(args)
    cfg = run_config(args)
    paths = synth.generate(scfg, args.out, cfg.region_map())
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_train(args) -> int:
    cfg = run_config(args)
    train = load_split(args.data, "train", cfg)
    stages = objective.STAGES if args.stage == "all" else (args.stage,)
    if args.ckpt_in:
        model = checkpoint.load(args.ckpt_in)
        cfg = for_model(cfg, model)
    elif stages[0] == "E":
        model = objective.init_model(train.parts.shape[2], len(np.unique(train.ids)), cfg)
    else:
        raise objective.StageOrderError(f"stage {stages[0]} needs --ckpt-in holding the earlier stages")
    res = objective.train_all(model, train, cfg, stages=stages)
    checkpoint.save(args.ckpt_out, res.model)
    if args.curve:
        objective.write_curve_csv(args.curve, res.curve)
    last = res.curve[-1][2] if res.curve else float("nan")
    print(f"stages {res.model.meta['stages']} -> {args.ckpt_out} (final loss {last:.6g})")
    return 0


def _eval_inputs(args):
    cfg = run_config(args)
    model = checkpoint.load(args.ckpt)
    cfg = for_model(cfg, model)
    return cfg, model, load_split(args.data, "query", cfg), load_split(args.data, "gallery", cfg)


def cmd_eval(args) -> int:
    cfg, model, q, g = _eval_inputs(args)
    out = pipeline.run_eval(model, q, g, cfg, recover=args.recover == "on", baseline=args.baseline,
                            graph=args.graph == "on")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    retrieval.write_report_csv(outdir / "report.csv", out.report)
    retrieval.write_ranklists_csv(outdir / "ranklists.csv", out.ranklists, args.max_rank)
    if out.contributions is not None:
        recovery.write_attention_csv(outdir / "attention.csv", out.contributions, out.nbr_idx)
    rep = out.report
    print(f"rank1={rep.rank1:.4f} mAP={rep.mAP:.4f} queries={rep.n_queries} skipped={rep.n_skipped}")
    return 0


def write_sweep_csv(path, param: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "rank1", "mAP"])
        for value, rep in rows:
            w.writerow([param, value, repr(rep.rank1), repr(rep.mAP)])


def cmd_sweep(args) -> int:
    cfg, model, q, g = _eval_inputs(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    rows = pipeline.sweep(model, q, g, cfg, args.param, values)
    write_sweep_csv(args.out, args.param, rows)
    for v, rep in rows:
        print(f"{args.param}={v} rank1={rep.rank1:.4f} mAP={rep.mAP:.4f}")
    return 0


def cmd_report(args) -> int:
    """Module ablation plus per-part before/after recovery."""
    cfg, model, q, g = _eval_inputs(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modules", "rank1", "mAP"])
        for name, rep in pipeline.ablation(model, q, g, cfg):
            w.writerow([name, repr(rep.rank1), repr(rep.mAP)])
            print(f"{name:6s} rank1={rep.rank1:.4f} mAP={rep.mAP:.4f}")
    before = pipeline.per_part_eval(model, q, g, cfg, recovered=False)
    after = pipeline.per_part_eval(model, q, g, cfg, recovered=True)
    with open(outdir / "parts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["part", "rank1_before", "rank1_after", "mAP_before", "mAP_after"])
        for part in (*PART_NAMES, "concat"):
            b, a = before[part], after[part]
            w.writerow([part, repr(b.rank1), repr(a.rank1), repr(b.mAP), repr(a.mAP)])
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occluded-reid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one stage (or all) and write a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=("E", "G", "T", "all"), required=True)
    p.add_argument("--ckpt-in")
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--curve", help="loss curve CSV")
    p.set_defaults(func=cmd_train)

    def evaluated(p):
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)

    p = sub.add_parser("eval", help="evaluate retrieval")
    evaluated(p)
    p.add_argument("--recover", choices=("on", "off"), default="on")
    p.add_argument("--baseline", choices=pipeline.BASELINES, default="none")
    p.add_argument("--graph", choices=("on", "off"), default="on")
    p.add_argument("--max-rank", type=int, default=None, help="truncate rank lists")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metric against one parameter")
    evaluated(p)
    p.add_argument("--param", choices=("k", "s", "delta", "gallery_size"), required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="ablation and per-part tables")
    evaluated(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
