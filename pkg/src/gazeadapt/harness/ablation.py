"""Layer-selection ablation: the 15-cell single/double level grid and its table.

Table text layout::

    Single Level Adaptation
          C1      C2      C3      C4      C5
        12.7    12.8    12.5    12.1   12.0*
    Double Level Adaptation
        C1C2    C1C3    ...
        12.6    12.3    ...

Values are mean angular error in degrees; ``*`` marks the best cell (every
tied cell is marked) and ``--`` a cell without a report. The CSV form keeps
full precision so it parses back to the same values.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigurationError
from ..nets import double_level_grid, single_level_grid
from ..pipeline.inference import EvalReport, compose_inference, evaluate, report_from_errors
from ..pipeline.stages import StageConfig, adapt_target

log = logging.getLogger(__name__)

SINGLE = tuple(s.name for s in single_level_grid())
DOUBLE = tuple(s.name for s in double_level_grid())
CSV_COLUMNS = ("selection", "level", "mean_error_deg", "best")
GAP = "--"


@dataclass(frozen=True)
class ExperimentGrid:
    selections: tuple[str, ...] = SINGLE + DOUBLE
    overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if sorted(self.selections) != sorted(SINGLE + DOUBLE):
            raise ConfigurationError("the ablation grid must hold C1..C5 and all ten C-pairs")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if "selection" in self.overrides or "seed" in self.overrides:
            raise ConfigurationError("selection and seed are set per grid cell")

    def cells(self):
        for name in self.selections:
            for seed in self.seeds:
                yield name, seed


def _value(report) -> float | None:
    if report is None:
        return None
    return float(report.mean_error if isinstance(report, EvalReport) else report)


def _best(values: dict[str, float | None]) -> set[str]:
    present = {k: v for k, v in values.items() if v is not None and math.isfinite(v)}
    if not present:
        return set()
    low = min(present.values())
    return {k for k, v in present.items() if v == low}


def emit_ablation_table(reports: dict) -> tuple[str, str]:
    """Table text and CSV for a (possibly partial) mapping selection -> report/error."""
    unknown = set(reports) - set(SINGLE + DOUBLE)
    if unknown:
        raise ConfigurationError(f"not a grid cell: {sorted(unknown)}")
    values = {name: _value(reports.get(name)) for name in SINGLE + DOUBLE}
    best = _best(values)

    def cell(name):
        v = values[name]
        return GAP if v is None else f"{v:.1f}" + ("*" if name in best else "")

    lines = []
    for title, names in (("Single Level Adaptation", SINGLE), ("Double Level Adaptation", DOUBLE)):
        lines.append(title)
        lines.append("".join(f"{n:>8}" for n in names))
        lines.append("".join(f"{cell(n):>8}" for n in names))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name in SINGLE + DOUBLE:
        v = values[name]
        level = "single" if name in SINGLE else "double"
        w.writerow([name, level, "" if v is None else repr(v), int(name in best)])
    return text, buf.getvalue()


def parse_ablation_csv(text: str) -> dict[str, float | None]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ConfigurationError("not an ablation table CSV")
    return {r["selection"]: (float(r["mean_error_deg"]) if r["mean_error_deg"] else None) for r in rows}


def trend_holds(reports: dict) -> bool:
    """True when some double-level cell beats the best single-level cell."""
    values = {k: _value(v) for k, v in reports.items()}
    singles = [values[n] for n in SINGLE if values.get(n) is not None]
    doubles = [values[n] for n in DOUBLE if values.get(n) is not None]
    return bool(singles and doubles) and min(doubles) < min(singles)


def _run_cell(args):
    name, seed, source_ckpt, base, source, target, test, run_dir = args
    cfg = StageConfig(**{**base, "stage": "adapt", "selection": name, "seed": seed})
    cell_dir = None if run_dir is None else Path(run_dir) / f"{name}_seed{seed}"
    res = adapt_target(source_ckpt, cfg, source, target, run_dir=cell_dir)
    report = evaluate(compose_inference(res.checkpoint, source_ckpt), test)
    log.info("ablation %s seed=%d error=%.3f deg", name, seed, report.mean_error)
    if cell_dir is not None:
        report.save(cell_dir / "report.json")
    return name, seed, report.mean_error


def run_ablation(grid: ExperimentGrid, source_ckpt, source, target, test, run_dir=None,
                 workers: int = 1) -> dict[str, EvalReport]:
    """Adapt and evaluate every cell; a cell's report averages its seeds."""
    base = {k: v for k, v in grid.overrides.items() if k != "stage"}
    jobs = [(n, s, source_ckpt, base, source, target, test, run_dir) for n, s in grid.cells()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    per_cell: dict[str, dict[int, float]] = {}
    for name, seed, err in results:
        per_cell.setdefault(name, {})[seed] = err
    reports = {}
    for name in grid.selections:
        errs = [per_cell[name][s] for s in grid.seeds]
        reports[name] = report_from_errors(errs, source_ckpt.fingerprint, "adapt", selection=name,
                                           seeds=list(grid.seeds))
    if run_dir is not None:
        text, table = emit_ablation_table(reports)
        Path(run_dir, "ablation.txt").write_text(text)
        Path(run_dir, "ablation.csv").write_text(table)
    return reports
