"""Command-line entry point: ``tpcvit {train,eval,bench,trace,flops,sweep}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import compare_dense_tpc, forced_schedule, thread_cap
from .config import PRESETS, SECTIONS, RunConfig
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .metrics import TraceSink, count_flops
from .model import build_model
from .plots import bar_chart, line_chart
from .train import evaluate, load_model, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("tpcvit")


def version_hash(version: str = __version__) -> str:
    """Git-style blob hash of the version string."""
    data = version.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig | None, seed, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "version_hash": version_hash(),
        "seed": seed,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_config(args) -> RunConfig:
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.config is None:
        return RunConfig.from_dict({}, overrides)
    return RunConfig.load(args.config, overrides)


def _plots(out: Path, history) -> None:
    losses = {k: [h.losses[k] for h in history] for k in ("task", "final")}
    (out / "loss.svg").write_text(line_chart(losses, "training loss", ylabel="loss"))
    if history:
        hist = history[-1].halting_histogram
        (out / "depth.svg").write_text(bar_chart(hist, title="halting layer of patch tokens (last step)"))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    write_manifest(out, "train", cfg, cfg.train.seed)
    try:
        result = train(cfg, out, resume=args.resume)
    except NumericalError as exc:
        dump = out / "nan_dump.json"
        dump.write_text(json.dumps({"error": str(exc), "records": exc.records}, indent=1))
        print(f"numerical failure: {exc}\ndiagnostic dump: {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    if cfg.train.plots:
        _plots(out, result.history)
    if result.final_eval is not None:
        print(json.dumps(result.final_eval.as_dict()))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = load_model(args.checkpoint)
    from .data import load_datasets

    _, eval_data = load_datasets(cfg.data)
    res = evaluate(model, eval_data.astype(model.dtype), cfg.train.batch_size)
    text = json.dumps(res.as_dict(), indent=2)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "eval", cfg, cfg.train.seed, {"checkpoint": str(args.checkpoint)})
        (out / "eval.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    if args.checkpoint:
        cfg, model = load_model(args.checkpoint)
    else:
        cfg = _load_config(args)
        model = build_model(cfg.model, cfg.tpc, cfg.train.seed)
    from .data import load_datasets

    _, eval_data = load_datasets(cfg.data)
    images = eval_data.images[: args.images].astype(model.dtype)
    sink = TraceSink()
    model.forward(images, trace=sink, step=0)
    out = Path(args.out)
    write_manifest(out, "trace", cfg, cfg.train.seed)
    with open(out / "trace.csv", "w", newline="") as f:
        sink.write(f)
    print(f"{len(sink.events)} trace rows written to {out / 'trace.csv'}")
    return EXIT_OK


def _model_config(args) -> tuple:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}", "--preset")
        cfg = RunConfig.from_dict({"model": {"preset": args.preset}}, args.overrides or [])
        return cfg.model, cfg.tpc
    cfg = _load_config(args)
    return cfg.model, cfg.tpc


def _read_schedule(path, depth: int) -> list:
    try:
        counts = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read mask schedule {path}: {exc}", "--mask-schedule") from exc
    if not isinstance(counts, list) or len(counts) != depth or not all(isinstance(c, int) for c in counts):
        raise ConfigError(f"mask schedule must be a JSON list of {depth} integers", "--mask-schedule")
    return counts


def cmd_flops(args) -> int:
    model_cfg, tpc = _model_config(args)
    if args.mask_schedule:
        counts = _read_schedule(args.mask_schedule, model_cfg.depth)
        try:
            ledger = count_flops(model_cfg, counts, tpc)
        except ContractError as exc:
            raise ConfigError(str(exc), "--mask-schedule") from exc
    else:
        ledger = count_flops(model_cfg)
    print(ledger.summary())
    print()
    print(ledger.to_csv(), end="")
    if args.out:
        out = Path(args.out)
        write_manifest(out, "flops", None, None, {"model": dataclasses.asdict(model_cfg)})
        (out / "flops.csv").write_text(ledger.to_csv())
    return EXIT_OK


def cmd_bench(args) -> int:
    model_cfg, tpc = _model_config(args)
    tpc = dataclasses.replace(tpc, mask_mode="drop")
    dtype = np.float32 if args.dtype == "float32" else np.float64
    model = build_model(model_cfg, tpc, seed=0, dtype=dtype)
    rng = np.random.default_rng(0)
    c = model_cfg
    images = rng.standard_normal((args.batch, c.in_chans, c.image_size, c.image_size)).astype(dtype)
    depths = forced_schedule(c.num_patches, c.depth, args.mean_depth) if c.depth else None
    modes = ["single", "batch"] if args.mode == "both" else [args.mode]
    report = {}
    for mode in modes:
        if c.depth == 0:
            from .bench import bench_throughput

            res = bench_throughput(model.vanilla_infer, images, args.repetitions, args.warmup, mode)
            report[mode] = {"ingest_ceiling": res.as_dict()}
        else:
            cmp = compare_dense_tpc(model, images, depths, args.repetitions, args.warmup, mode)
            report[mode] = {"dense": cmp["dense"].as_dict(), "tpc": cmp["tpc"].as_dict(), "speedup": cmp["speedup"]}
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "bench", None, 0, {"model": dataclasses.asdict(model_cfg), "threads": thread_cap()})
        (out / "bench.json").write_text(text)
    return EXIT_OK


def _axis_key(name: str) -> str:
    if "." in name:
        return name
    owners = [s for s, kind in SECTIONS.items() if name in {f.name for f in dataclasses.fields(kind)}]
    if len(owners) != 1:
        raise ConfigError(f"axis {name!r} is ambiguous or unknown; use section.field", name)
    return f"{owners[0]}.{name}"


def parse_axis(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"axis {text!r} must look like key=v1,v2", text)
    name, values = text.split("=", 1)
    items = [v for v in values.split(",") if v != ""]
    if not items:
        raise ConfigError(f"axis {name!r} has no values", name)
    return _axis_key(name.strip()), items


def cmd_sweep(args) -> int:
    base = _load_config(args)
    axes = [parse_axis(a) for a in args.axis]
    # validate every point before running any
    points = []
    for combo in itertools.product(*[[(k, v) for v in vals] for k, vals in axes]):
        cfg = RunConfig.from_dict(base.to_dict(), [f"{k}={v}" for k, v in combo])
        points.append((combo, cfg))
    out = Path(args.out)
    write_manifest(out, "sweep", base, base.train.seed, {"axes": {k: v for k, v in axes}})
    rows = []
    for i, (combo, cfg) in enumerate(points):
        label = ",".join(f"{k}={v}" for k, v in combo)
        run_dir = out / f"run{i:03d}"
        row = {"value": label, "top1": "", "mean_depth": "", "flops": "", "status": "ok"}
        try:
            write_manifest(run_dir, "train", cfg, cfg.train.seed, {"sweep_point": label})
            res = train(cfg, run_dir)
            ev = res.final_eval
            row.update(top1=ev.top1, mean_depth=ev.mean_depth, flops=ev.flops)
        except Exception as exc:  # a failed point is recorded and the sweep moves on
            log.warning("sweep point %s failed: %s", label, exc)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
        print(label, row["status"], row["top1"], row["mean_depth"], row["flops"], flush=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["value", "top1", "mean_depth", "flops", "status"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpcvit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tpcvit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_required=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
            sp.add_argument("--seed", type=int, help="overrides train.seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("overrides", nargs="*", help="section.field=value overrides")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on its eval split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace", help="write the token lifecycle of one forward pass")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--images", type=int, default=4)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("flops", help="print the analytic FLOPs ledger")
    common(sp, out_required=False)
    sp.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    sp.add_argument("--mask-schedule", help="JSON list of active token counts per layer")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("bench", help="dense vs controlled inference throughput")
    common(sp, out_required=False)
    sp.add_argument("--preset")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--repetitions", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--mode", choices=["single", "batch", "both"], default="single")
    sp.add_argument("--mean-depth", type=float, help="forced mean halting layer (default depth/2)")
    sp.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("sweep", help="train once per value of one or more config axes")
    common(sp)
    sp.add_argument("--axis", action="append", required=True, help="key=v1,v2,... (repeatable)")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
