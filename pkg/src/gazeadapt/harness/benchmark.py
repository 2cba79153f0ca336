"""Desk-scale adaptation benchmark.

One dataset, one shared stage-1 source model, then one adaptation run per
benchmark seed. Run with ``python -m gazeadapt.harness.benchmark --out DIR``;
the shipped configuration is ``gazeadapt/configs/benchmark.cfg``.

Outputs under ``DIR``: ``data/`` (reused when its generator.cfg matches),
``stage1/``, ``adapt_seed<k>/`` (checkpoint, traces, report.json),
``benchmark.cfg`` (resolved config) and ``benchmark.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .. import config as cfgmod
from ..data import generate_dataset, generator_config, load_dataset, read_manifest
from ..errors import GazeAdaptError
from ..pipeline import (StageConfig, adapt_target, compose_inference, evaluate,
                        relative_improvement, source_predictor, train_source)

log = logging.getLogger(__name__)

BENCHMARK_SCHEMA = {
    "seeds": lambda s: tuple(int(v) for v in s.split(",")),
    "min_relative_improvement": float,
    "min_passing_seeds": int,
    "stage1_max_error": float,
    "time_budget_min": float,
}
BENCHMARK_DEFAULTS = {
    "seeds": (0, 1, 2), "min_relative_improvement": 0.20, "min_passing_seeds": 2,
    "stage1_max_error": 5.0, "time_budget_min": 45.0,
}


def shipped_config() -> Path:
    return Path(str(resources.files("gazeadapt") / "configs" / "benchmark.cfg"))


def load_benchmark_config(path=None, overrides=None) -> dict[str, str]:
    raw = cfgmod.load_file(path or shipped_config())
    raw.update(overrides or {})
    return raw


def confusion_trend(heldout: list[dict], total_iterations: int) -> dict:
    """End-of-run held-out accuracy against its peak over the first 10% of iterations."""
    early = [h["heldout_domain_acc"] for h in heldout if h["iteration"] <= 0.1 * total_iterations]
    if not heldout or not early:
        return {"early_peak": None, "final": None, "holds": False}
    final = heldout[-1]["heldout_domain_acc"]
    return {"early_peak": max(early), "final": final, "holds": final < max(early)}


@dataclass
class BenchmarkReport:
    stage1_val_error: float
    pre_error: float
    post_errors: dict[int, float]
    relative_improvements: dict[int, float]
    confusion: dict[int, dict]
    seconds: dict[str, float]
    criteria: dict[str, bool] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _data(raw, out: Path) -> Path:
    gen = generator_config(cfgmod.section_only(raw, "data"))
    data_dir = out / "data"
    snapshot = cfgmod.dump_text(gen)
    cfg_file = data_dir / "generator.cfg"
    if cfg_file.is_file() and cfg_file.read_text() == snapshot and (data_dir / "manifest.csv").is_file():
        log.info("reusing dataset in %s", data_dir)
        return data_dir / "manifest.csv"
    return generate_dataset(gen, data_dir)


def run_benchmark(out, config_path=None, overrides=None) -> BenchmarkReport:
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    raw = load_benchmark_config(config_path, overrides)
    (out / "benchmark.cfg").write_text(cfgmod.dump_text(raw))
    bench = cfgmod.coerce(cfgmod.section_only(raw, "benchmark"), BENCHMARK_SCHEMA, BENCHMARK_DEFAULTS)
    seconds = {}

    manifest = _data(raw, out)
    seconds["data"] = time.perf_counter() - t0
    load = lambda split, domain: load_dataset(read_manifest(manifest, split=split, domain=domain))
    src_train, src_val = load("train", "source"), load("val", "source")
    tgt_train, tgt_test = load("train", "target"), load("test", "target")

    stage1 = StageConfig.from_strings("source", cfgmod.section_only(raw, "stage1"))
    res1 = train_source(stage1, src_train, src_val, run_dir=out / "stage1")
    seconds["stage1"] = res1.seconds
    source_ckpt = res1.checkpoint
    val_err = evaluate(source_predictor(source_ckpt), src_val).mean_error
    pre = evaluate(source_predictor(source_ckpt), tgt_test)
    pre.save(out / "stage1" / "target_report.json")
    log.info("stage 1: source val %.3f deg, target pre-adaptation %.3f deg", val_err, pre.mean_error)

    post, rel, confusion = {}, {}, {}
    adapt_values = cfgmod.section_only(raw, "adapt")
    for seed in bench["seeds"]:
        cfg = StageConfig.from_strings("adapt", {**adapt_values, "seed": str(seed)})
        run = out / f"adapt_seed{seed}"
        res = adapt_target(source_ckpt, cfg, src_train, tgt_train, run_dir=run)
        report = evaluate(compose_inference(res.checkpoint, source_ckpt), tgt_test)
        report.extra.update(seed=seed, pre_error=pre.mean_error,
                            relative_improvement=relative_improvement(pre.mean_error, report.mean_error))
        report.save(run / "report.json")
        post[seed] = report.mean_error
        rel[seed] = report.extra["relative_improvement"]
        confusion[seed] = confusion_trend(res.heldout_trace, cfg.max_iterations)
        seconds[f"adapt_seed{seed}"] = res.seconds
        log.info("seed %d: post %.3f deg, relative improvement %.3f", seed, post[seed], rel[seed])

    seconds["total"] = time.perf_counter() - t0
    passing = sum(r >= bench["min_relative_improvement"] for r in rel.values())
    first = bench["seeds"][0]
    criteria = {
        "stage1_val_error": val_err <= bench["stage1_max_error"],
        "relative_improvement": passing >= bench["min_passing_seeds"],
        "runtime": seconds["total"] <= 60 * bench["time_budget_min"],
        "confusion_trend": confusion[first]["holds"],
    }
    report = BenchmarkReport(val_err, pre.mean_error, post, rel, confusion, seconds, criteria,
                             {"source_checkpoint": str(out / "stage1" / "source.safetensors"),
                              "manifest": str(manifest)})
    (out / "benchmark.json").write_text(report.to_json() + "\n")
    return report


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m gazeadapt.harness.benchmark",
                                description="Run the desk-scale adaptation benchmark.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="benchmark config (default: the shipped one)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override a key, e.g. adapt.max_iterations=100")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = dict(s.split("=", 1) for s in args.set if "=" in s)
    try:
        report = run_benchmark(args.out, args.config, overrides)
    except GazeAdaptError as exc:
        print(f"gazeadapt: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(report.to_json())
    return 0 if all(report.criteria.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
