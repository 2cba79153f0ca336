"""Command line entry point.

Every subcommand accepts ``--config FILE`` (flat ``key = value``, sections
``data.``, ``stage1.``, ``adapt.``, ``grl.``, ``ablate.``) and repeated
``--set key=value`` overrides, which win over the file. Runs that write a
run directory leave ``config.cfg`` (the fully resolved stage config) and
``command.json`` (argv) next to their outputs.

Exit status: 0 success, 1 failure, 2 usage error, 3 training diverged.
Errors are printed as one line: ``gazeadapt: error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import config as cfgmod
from ..data import (convert_external_metadata, generate_dataset, generator_config, load_dataset,
                    read_manifest)
from ..errors import ConfigurationError, GazeAdaptError, IngestionError, TrainingDivergedError
from ..pipeline import (StageConfig, adapt_target, compose_inference, evaluate, load_checkpoint,
                        source_predictor, train_grl, train_source)
from ..pipeline.inference import report_from_errors
from ..objectives import angular_error_degrees

log = logging.getLogger("gazeadapt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"gazeadapt: error: {kind}: {message}", file=sys.stderr)
    return code


def _existing(flag: str, path: str | None, kind="file") -> Path:
    p = Path(path)
    ok = p.is_file() if kind == "file" else p.is_dir()
    if not ok:
        raise UsageError(f"{flag}: {kind} not found: {path}")
    return p


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _raw_config(args, section: str) -> dict[str, str]:
    raw = cfgmod.load_file(_existing("--config", args.config)) if args.config else {}
    values = cfgmod.section(raw, section)
    values.update(_overrides(args.set))
    return values


def _stage_config(args, stage: str, section: str, **fixed) -> StageConfig:
    values = _raw_config(args, section)
    values.update({k: str(v) for k, v in fixed.items()})
    return StageConfig.from_strings(stage, values)


def _snapshot(run_dir: Path, cfg: StageConfig, argv) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    values = {k: v for k, v in cfg.snapshot().items() if k != "stage"}
    (run_dir / "config.cfg").write_text(cfgmod.dump_text(values))
    (run_dir / "command.json").write_text(json.dumps(list(argv)) + "\n")


def _dataset(manifest: Path, split: str, domain: str, required: bool = True):
    m = read_manifest(manifest, split=split, domain=domain)
    if not len(m):
        if required:
            raise IngestionError(f"manifest has no {domain}/{split} rows")
        return None
    return load_dataset(m)


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args, argv):
    values = _raw_config(args, "data")
    cfg = generator_config(values)
    out = generate_dataset(cfg, args.out)
    print(f"manifest={out}")


def cmd_convert(args, argv):
    meta = _existing("--metadata", args.metadata)
    images = _existing("--images", args.images, "directory")
    _, report = convert_external_metadata(meta, images, args.out, domain=args.domain,
                                          split=args.split, flip_y=args.flip_y)
    print(f"converted={report.converted} skipped={len(report.errors)} manifest={args.out}")


def cmd_train_source(args, argv):
    manifest = _existing("--manifest", args.manifest)
    cfg = _stage_config(args, "source", "stage1")
    run = Path(args.run_dir)
    _snapshot(run, cfg, argv)
    train = _dataset(manifest, "train", "source")
    val = _dataset(manifest, "val", "source", required=False)
    res = train_source(cfg, train, val, run_dir=run)
    last = res.val_curve[-1]["val_mean_error_deg"] if res.val_curve else float("nan")
    print(f"checkpoint={run / 'source.safetensors'} val_mean_error_deg={last:.3f} "
          f"iterations={len(res.loss_trace)} seconds={res.seconds:.1f}")


def cmd_adapt(args, argv):
    manifest = _existing("--manifest", args.manifest)
    source_ckpt = load_checkpoint(_existing("--source", args.source))
    cfg = _stage_config(args, "adapt", "adapt")
    run = Path(args.run_dir)
    _snapshot(run, cfg, argv)
    res = adapt_target(source_ckpt, cfg, _dataset(manifest, "train", "source"),
                       _dataset(manifest, "train", "target"), run_dir=run)
    acc = res.heldout_trace[-1]["heldout_domain_acc"] if res.heldout_trace else float("nan")
    print(f"checkpoint={run / 'target.safetensors'} heldout_domain_acc={acc:.3f} "
          f"warnings={len(res.warnings)} seconds={res.seconds:.1f}")


def cmd_grl(args, argv):
    manifest = _existing("--manifest", args.manifest)
    cfg = _stage_config(args, "grl-baseline", "grl")
    run = Path(args.run_dir)
    _snapshot(run, cfg, argv)
    res = train_grl(cfg, _dataset(manifest, "train", "source"), _dataset(manifest, "train", "target"),
                    _dataset(manifest, "val", "source", required=False), run_dir=run)
    print(f"checkpoint={run / 'grl.safetensors'} seconds={res.seconds:.1f}")


def _read_predictions(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return {r["path"]: np.array([float(r["gx"]), float(r["gy"]), float(r["gz"])]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"bad predictions file {path}: {exc}") from None


def cmd_eval(args, argv):
    manifest_path = _existing("--manifest", args.manifest)
    m = read_manifest(manifest_path, split=args.split, domain=args.domain)
    if args.predictions:
        preds = _read_predictions(_existing("--predictions", args.predictions))
        if not m.labeled:
            raise IngestionError("evaluation requires labelled manifest rows")
        missing = [r.image for r in m.records if r.image not in preds]
        if missing:
            raise IngestionError(f"no prediction for {missing[0]} ({len(missing)} missing)")
        p = np.stack([preds[r.image] for r in m.records])
        t = np.stack([r.gaze for r in m.records])
        report = report_from_errors(angular_error_degrees(p, t), stage="predictions")
    else:
        if not args.checkpoint:
            raise UsageError("one of --checkpoint or --predictions is required")
        ckpt = load_checkpoint(_existing("--checkpoint", args.checkpoint))
        if ckpt.stage == "adapt":
            if not args.source:
                raise UsageError("--source is required to evaluate an adapted checkpoint")
            predictor = compose_inference(ckpt, load_checkpoint(_existing("--source", args.source)))
        else:
            predictor = source_predictor(ckpt)
        report = evaluate(predictor, m)
    if args.out:
        report.save(args.out)
    print(f"mean_error_deg={report.mean_error:.3f} n={report.n}")


def cmd_ablate(args, argv):
    from .ablation import ExperimentGrid, emit_ablation_table, run_ablation, trend_holds

    manifest = _existing("--manifest", args.manifest)
    source_ckpt = load_checkpoint(_existing("--source", args.source))
    values = _raw_config(args, "ablate")
    seeds_text, workers = values.pop("seeds", "0"), values.pop("workers", "1")
    try:
        seeds = tuple(int(s) for s in (args.seeds or seeds_text).split(","))
        workers = args.workers or int(workers)
    except ValueError as exc:
        raise ConfigurationError(f"bad seeds/workers: {exc}") from None
    base = StageConfig.from_strings("adapt", values)
    run = Path(args.run_dir)
    _snapshot(run, base, argv)
    overrides = {k: v for k, v in vars(base).items() if k not in ("stage", "selection", "seed")}
    grid = ExperimentGrid(overrides=overrides, seeds=seeds)
    test = _dataset(manifest, args.split, "target")
    if args.test_limit:
        test = test.subset(range(min(args.test_limit, len(test))))
    reports = run_ablation(grid, source_ckpt, _dataset(manifest, "train", "source"),
                           _dataset(manifest, "train", "target"), test, run_dir=run, workers=workers)
    text, _ = emit_ablation_table(reports)
    print(text, end="")
    print(f"double_beats_single={str(trend_holds(reports)).lower()} seeds={','.join(map(str, seeds))}")


def cmd_report(args, argv):
    from .ablation import emit_ablation_table, parse_ablation_csv

    if args.ablation:
        values = parse_ablation_csv(_existing("--ablation", args.ablation).read_text())
        print(emit_ablation_table(values)[0], end="")
        return
    run = _existing("--run-dir", args.run_dir, "directory")
    found = sorted(run.rglob("*report*.json"))
    if not found:
        raise IngestionError(f"no report JSON under {run}")
    for path in found:
        data = json.loads(path.read_text())
        print(f"{path.relative_to(run)} mean_error_deg={data['mean_error']:.3f} n={data['n']}")


def cmd_plot(args, argv):
    from .figures import emit_overlay_figure, emit_training_curves

    out = Path(args.out)
    if args.trace:
        traces = {}
        for item in args.trace:
            name, _, path = item.rpartition("=")
            traces[name or Path(path).parent.name] = _existing("--trace", path)
        paths, skipped = emit_training_curves(traces, out, fmt=args.format)
        print(f"figures={len(paths)} skipped_rows={skipped}")
        return
    if not (args.manifest and args.source and args.target):
        raise UsageError("plot needs --trace, or --manifest with --source and --target")
    manifest = _existing("--manifest", args.manifest)
    src = load_checkpoint(_existing("--source", args.source))
    tgt = load_checkpoint(_existing("--target", args.target))
    data = _dataset(manifest, args.split, "target")
    paths = emit_overlay_figure(source_predictor(src), compose_inference(tgt, src), data, out,
                                limit=args.limit)
    print(f"figures={len(paths)}")


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gazeadapt", description="Gaze regression with adversarial feature adaptation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="render the two-domain synthetic dataset"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("convert", help="convert external metadata (look_vec JSON) to a manifest")
    sp.add_argument("--metadata", required=True)
    sp.add_argument("--images", required=True, help="image directory")
    sp.add_argument("--out", required=True, help="manifest CSV to write")
    sp.add_argument("--domain", default="source", choices=("source", "target"))
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--flip-y", action="store_true", help="negate the y component (y-up sources)")
    sp.set_defaults(func=cmd_convert)

    sp = with_config(sub.add_parser("train-source", help="stage 1: supervised source training"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_train_source)

    sp = with_config(sub.add_parser("adapt", help="stage 2: adversarial target adaptation"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--source", required=True, help="source checkpoint")
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_adapt)

    sp = with_config(sub.add_parser("grl-baseline", help="simultaneous gradient-reversal baseline"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_grl)

    sp = sub.add_parser("eval", help="mean angular error on labelled manifest rows")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", help="source or adapted checkpoint")
    sp.add_argument("--source", help="source checkpoint (needed for adapted checkpoints)")
    sp.add_argument("--predictions", help="CSV with path,gx,gy,gz instead of a checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--domain", default="target")
    sp.add_argument("--out", help="write the report JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="15-cell layer-selection grid"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--seeds", help="comma separated adaptation seeds (default 0)")
    sp.add_argument("--workers", type=int, help="parallel grid cells (default 1)")
    sp.add_argument("--split", default="test")
    sp.add_argument("--test-limit", type=int, default=0, help="evaluate on the first N rows only")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="print ablation tables or evaluation reports")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--ablation", help="ablation CSV")
    g.add_argument("--run-dir", help="directory searched for report JSON files")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("plot", help="training curves or gaze overlay figures")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--trace", action="append", metavar="NAME=CSV", help="trace to plot")
    sp.add_argument("--format", default="png", choices=("png", "svg"))
    sp.add_argument("--manifest")
    sp.add_argument("--source")
    sp.add_argument("--target")
    sp.add_argument("--split", default="test")
    sp.add_argument("--limit", type=int, default=16)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
        args.func(args, argv)
    except UsageError as exc:
        return _fail("UsageError", exc, 2)
    except TrainingDivergedError as exc:
        return _fail(type(exc).__name__, exc, 3)
    except ConfigurationError as exc:
        return _fail(type(exc).__name__, exc, 2)
    except GazeAdaptError as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
