"""Hierarchical region timing, scaling metrics, the strong/weak scaling
harness, and an analytic cost-model predictor.

Timers nest by region name; each worker owns a private tree and the trees
merge by path after a run (max/min/mean across workers; component wall
time is the max). Metrics follow the standard definitions: SYPD uses a
365-day year, strong-scaling efficiency is actual over ideal speedup, weak
efficiency is the baseline time over the scaled time, and bandwidth is
reported in binary units (MiB/s, GiB/s) from decimal-GB inputs.
"""

from __future__ import annotations

import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Bandwidth",
    "CostModel",
    "MergedTimer",
    "ScalingRecord",
    "ScalingTable",
    "TimerTree",
    "bandwidth",
    "compute_sypd",
    "predict_times",
    "render_scaling_svg",
    "run_scaling_suite",
    "scaling_csv",
    "speedup_table",
    "weak_efficiency",
]

SECONDS_PER_DAY = 86_400.0
DAYS_PER_YEAR = 365.0


class TimerTree:
    """One worker's nested wall-clock regions."""

    def __init__(self, name: str = "root"):
        self.name = name
        self.seconds = 0.0
        self.count = 0
        self.children: dict = {}

    def child(self, name: str) -> "TimerTree":
        node = self.children.get(name)
        if node is None:
            node = self.children[name] = TimerTree(name)
        return node

    @contextmanager
    def region(self, name: str):
        node = self.child(name)
        t0 = time.perf_counter()
        try:
            yield node
        finally:
            node.seconds += time.perf_counter() - t0
            node.count += 1

    def add(self, name: str, seconds: float, count: int = 1) -> None:
        node = self.child(name)
        node.seconds += seconds
        node.count += count

    def total(self, path: str) -> float:
        node = self
        for part in path.split("/"):
            node = node.children[part]
        return node.seconds

    def validate(self, slack: float = 0.001) -> None:
        """Children must not out-sum their parent (within slack seconds)."""
        for node in self._walk():
            if node.children and node.seconds > 0:
                child_sum = sum(c.seconds for c in node.children.values())
                if child_sum > node.seconds + slack:
                    raise ValueError(
                        f"region {node.name}: children sum {child_sum:.6f}s exceeds "
                        f"parent {node.seconds:.6f}s"
                    )

    def _walk(self):
        yield self
        for c in self.children.values():
            yield from c._walk()

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "seconds": self.seconds,
            "count": self.count,
            "children": [c.as_dict() for c in self.children.values()],
        }

    def report(self, indent: int = 0) -> str:
        lines = [f"{'  ' * indent}{self.name}: {self.seconds:.4f}s x{self.count}"]
        for c in self.children.values():
            lines.append(c.report(indent + 1))
        return "\n".join(lines)


@dataclass
class MergedTimer:
    name: str
    max_seconds: float
    min_seconds: float
    mean_seconds: float
    n_workers: int
    children: dict = field(default_factory=dict)


def merge_timers(trees: list, name: str = "root") -> MergedTimer:
    """Merge per-worker trees by region name; wall time is the max."""
    secs = [t.seconds for t in trees]
    merged = MergedTimer(
        name=name,
        max_seconds=max(secs),
        min_seconds=min(secs),
        mean_seconds=sum(secs) / len(secs),
        n_workers=len(trees),
    )
    names = []
    for t in trees:
        for n in t.children:
            if n not in names:
                names.append(n)
    for n in names:
        subtrees = [t.children[n] for t in trees if n in t.children]
        merged.children[n] = merge_timers(subtrees, name=n)
    return merged


# ---------------------------------------------------------------------------
# Metrics


def compute_sypd(wall_seconds: float, sim_days: float) -> float:
    """Simulated years per wall-clock day, on a 365-day year."""
    if wall_seconds <= 0:
        raise ValueError("wall_seconds must be positive")
    return (sim_days / DAYS_PER_YEAR) / (wall_seconds / SECONDS_PER_DAY)


@dataclass
class ScalingRecord:
    case: str
    component: str  # ATM, CPL or LND
    n_cores: int
    init_seconds: float
    run_seconds: float
    sim_days: float
    cells_per_core: float = 0.0
    label: str = "measured"

    @property
    def sypd(self) -> float:
        return compute_sypd(self.run_seconds, self.sim_days)


@dataclass
class ScalingTable:
    records: list
    baseline_index: int = 0

    def __post_init__(self):
        base = self.records[self.baseline_index]
        cases = {r.component for r in self.records}
        if len(cases) != 1:
            raise ValueError("records must share one component")
        cores = [r.n_cores for r in self.records]
        if len(set(cores)) != len(cores):
            raise ValueError("duplicate core counts in scaling records")
        self.speedup = [base.run_seconds / r.run_seconds for r in self.records]
        self.ideal = [r.n_cores / base.n_cores for r in self.records]
        self.efficiency = [s / i for s, i in zip(self.speedup, self.ideal)]


def speedup_table(records: list, baseline_index: int = 0) -> ScalingTable:
    """Strong-scaling speedup, ideal speedup, and parallel efficiency."""
    return ScalingTable(list(records), baseline_index)


def weak_efficiency(records: list, baseline_index: int = 0, tolerance: float = 0.05) -> list:
    """Scaled efficiency T_base / T_i for constant per-core workload."""
    base = records[baseline_index]
    for r in records:
        if base.cells_per_core and r.cells_per_core:
            drift = abs(r.cells_per_core - base.cells_per_core) / base.cells_per_core
            if drift > tolerance:
                raise ValueError(
                    f"cells per core varies by {drift:.1%} (> {tolerance:.0%}): "
                    "not a weak-scaling series"
                )
    return [base.run_seconds / r.run_seconds for r in records]


@dataclass
class Bandwidth:
    bytes: float
    seconds: float

    @property
    def mib_per_s(self) -> float:
        return self.bytes / self.seconds / 2**20

    @property
    def gib_per_s(self) -> float:
        return self.bytes / self.seconds / 2**30


def bandwidth(decimal_gb: float, seconds: float) -> Bandwidth:
    """Write rate from a decimal-GB volume (1 GB = 1e9 B), in binary units."""
    if decimal_gb <= 0 or seconds <= 0:
        raise ValueError("bandwidth needs positive volume and time")
    return Bandwidth(bytes=decimal_gb * 1e9, seconds=seconds)


# ---------------------------------------------------------------------------
# Cost-model predictor (labeled "model" in all outputs)


@dataclass
class CostModel:
    """T(P) = c_cell*N*steps/P + c_sync*steps*log2(max(P, 2)).

    io_read_points holds measured (cores, seconds) pairs for the read
    phase; io_read_seconds interpolates them piecewise. Reads are kept out
    of the land-time predictor, whose formula covers compute + sync only.
    """

    c_cell: float = 0.0  # seconds per cell-step
    c_sync: float = 0.0  # seconds per step per log2(P)
    io_read_points: list = None  # [(cores, seconds)], optional calibration

    def calibrated(self) -> bool:
        return self.c_cell > 0

    def io_read_seconds(self, n_cores: int) -> float:
        if not self.io_read_points:
            return 0.0
        pts = sorted(self.io_read_points)
        cores = [p for p, _ in pts]
        secs = [s for _, s in pts]
        return float(np.interp(n_cores, cores, secs))

    def calibrate(self, run_seconds: float, n_cells: int, n_steps: int, n_cores: int) -> None:
        sync = self.c_sync * n_steps * math.log2(max(n_cores, 2))
        self.c_cell = max(run_seconds - sync, 0.0) * n_cores / (n_cells * n_steps)

    def predict(self, n_cells: int, n_steps: int, n_cores: int) -> float:
        return (
            self.c_cell * n_cells * n_steps / n_cores
            + self.c_sync * n_steps * math.log2(max(n_cores, 2))
        )


def predict_times(model: CostModel, n_cells: int, n_steps: int, core_counts: list,
                  sim_days: float, case: str = "predicted") -> ScalingTable:
    if not model.calibrated():
        raise ValueError("cost model is not calibrated (run calibrate first)")
    records = [
        ScalingRecord(
            case=case,
            component="LND",
            n_cores=p,
            init_seconds=0.0,
            run_seconds=model.predict(n_cells, n_steps, p),
            sim_days=sim_days,
            cells_per_core=n_cells / p,
            label="model",
        )
        for p in core_counts
    ]
    return ScalingTable(records)


# ---------------------------------------------------------------------------
# CSV and SVG outputs

CSV_HEADER = "case,component,phase,cores,seconds,sypd,speedup,efficiency"


def scaling_csv(table: ScalingTable) -> str:
    lines = [CSV_HEADER]
    for r, s, e in zip(table.records, table.speedup, table.efficiency):
        lines.append(
            f"{r.case},{r.component},init,{r.n_cores},{r.init_seconds:.6f},,,"
        )
        lines.append(
            f"{r.case},{r.component},run,{r.n_cores},{r.run_seconds:.6f},"
            f"{r.sypd:.4f},{s:.4f},{e:.4f}"
        )
    return "\n".join(lines) + "\n"


def render_scaling_svg(table: ScalingTable, title: str) -> str:
    """Bar chart of ideal vs measured speedup with efficiency labels."""
    n = len(table.records)
    width, height = 120 * n + 100, 360
    plot_h = 260.0
    max_val = max(max(table.ideal), max(table.speedup), 1.0)
    scale = plot_h / max_val
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="50" y1="{40 + plot_h}" x2="{width - 20}" y2="{40 + plot_h}" stroke="black"/>',
    ]
    for i, (rec, ideal, actual, eff) in enumerate(
        zip(table.records, table.ideal, table.speedup, table.efficiency)
    ):
        x0 = 70 + 120 * i
        hi, ha = ideal * scale, actual * scale
        parts.append(
            f'<rect x="{x0}" y="{40 + plot_h - hi:.1f}" width="40" height="{hi:.1f}" '
            'fill="steelblue"/>'
        )
        parts.append(
            f'<rect x="{x0 + 44}" y="{40 + plot_h - ha:.1f}" width="40" height="{ha:.1f}" '
            'fill="indianred"/>'
        )
        parts.append(
            f'<text x="{x0 + 42}" y="{30 + plot_h - max(hi, ha):.1f}" '
            f'text-anchor="middle" font-size="12">{eff * 100:.0f}%</text>'
        )
        parts.append(
            f'<text x="{x0 + 42}" y="{60 + plot_h:.1f}" text-anchor="middle" '
            f'font-size="12">{rec.n_cores} ({rec.label})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Measured scaling harness


def run_scaling_suite(
    cfg,
    worker_counts: list,
    mode: str,
    out_dir: str,
    cells_per_worker: int = 1700,
    check_equivalence: bool = True,
    repeats: int = 1,
) -> dict:
    """Run a case across worker counts (strong: fixed case; weak: the case
    replicated proportionally at `cells_per_worker` cells per worker).

    With `repeats` > 1 each point is measured several times and the run
    with the smallest land time is kept (the minimum is the least
    contention-disturbed estimate on shared machines). Emits per-component
    ScalingTables, a CSV, and an SVG speedup chart; every run's outputs
    are checked bit-identical to the first run's (for strong mode) unless
    disabled.
    """
    from . import compare as compare_mod
    from . import simulation

    if mode not in ("strong", "weak"):
        raise ValueError("mode must be 'strong' or 'weak'")
    machine_cores = os.cpu_count() or 1
    over = [w for w in worker_counts if w > machine_cores]
    if over:
        raise ValueError(
            f"requested workers {over} exceed the machine's {machine_cores} cores "
            "in measured mode"
        )
    os.makedirs(out_dir, exist_ok=True)
    rows = {"ATM": [], "CPL": [], "LND": []}
    reference = None
    for w in worker_counts:
        run_cfg = simulation.replace_workers(cfg, w)
        if mode == "weak":
            run_cfg = simulation.replicate_case(run_cfg, w, out_dir)
        best = None
        for rep in range(max(repeats, 1)):
            run_dir = os.path.join(out_dir, f"{mode}_w{w}" + (f"_r{rep}" if rep else ""))
            result = simulation.run_case(run_cfg, run_dir)
            if check_equivalence and mode == "strong":
                if reference is None:
                    reference = result
                else:
                    pairs = list(zip(reference.history_paths, result.history_paths))
                    ref_bundle = reference.latest_restart
                    new_bundle = result.latest_restart
                    for kind in ("elm_r", "cpl_r", "datm_r", "rh0"):
                        pairs.append(
                            (
                                os.path.join(reference.out_dir, ref_bundle[kind]),
                                os.path.join(result.out_dir, new_bundle[kind]),
                            )
                        )
                    for a, b in pairs:
                        report = compare_mod.compare_files(a, b, tol="bit_exact")
                        if report.verdict != "identical":
                            raise AssertionError(
                                f"scaling run with {w} workers diverged from the "
                                f"reference: {os.path.basename(b)}"
                            )
            if best is None or result.component_seconds["lnd"] < best.component_seconds["lnd"]:
                best = result
        for comp, region in (("ATM", "atm"), ("CPL", "cpl"), ("LND", "lnd")):
            rows[comp].append(
                ScalingRecord(
                    case=run_cfg.name,
                    component=comp,
                    n_cores=w,
                    init_seconds=best.init_seconds,
                    run_seconds=best.component_seconds[region],
                    sim_days=run_cfg.n_days,
                    cells_per_core=best.n_land / w,
                )
            )
    tables = {comp: ScalingTable(recs) for comp, recs in rows.items()}
    csv_path = os.path.join(out_dir, f"scaling_{mode}.csv")
    with open(csv_path, "w") as fh:
        for comp in ("ATM", "CPL", "LND"):
            fh.write(scaling_csv(tables[comp]))
    svg_path = os.path.join(out_dir, f"scaling_{mode}_lnd.svg")
    with open(svg_path, "w") as fh:
        fh.write(render_scaling_svg(tables["LND"], f"LND {mode} scaling"))
    return {"tables": tables, "csv": csv_path, "svg": svg_path}
