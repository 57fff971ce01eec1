"""Simulation driver: a data atmosphere replaying forcing files with
timestep interpolation, a one-way coupler, and a land component stepping an
independent-column toy model, with time-averaged history output, restart
write/resume, and gridcell-parallel execution.

Every cell evolves independently (no lateral coupling), so results are
bit-identical for any worker count and partition scheme; replicated
domains are served from their base forcing/surface files through the
copy->source mapping, which makes a replicated run's output exactly k
copies of the base output. Output files carry no wall-clock metadata, so
equal runs produce byte-equal files.

The land physics is a deliberately small five-pool column model (snow,
soil water, soil temperature, leaf and soil carbon) chosen to be linear in
the carbon pools and conservative in water, so the computational claims
(independence, replication, restart transparency) are exactly testable.
It is a structural stand-in, not land-model science.
"""

from __future__ import annotations

import datetime
import glob
import hashlib
import os
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing
import numpy as np

from . import cdf
from .decomp import build_iodecomp, make_plan, partition, rearrange_write, DEFAULT_BUFFER_LIMIT
from .domain import read_domain, replicate, write_domain
from .forcing import ForcingStream, VARIABLES
from .perf import TimerTree
from .surface import read_surface

__all__ = [
    "CaseConfig",
    "HIST_VARS",
    "RunResult",
    "STATE_VARS",
    "SpinupReport",
    "ToyParams",
    "init_state",
    "leaf_fixed_point",
    "replicate_case",
    "replace_workers",
    "resume_case",
    "run_case",
    "run_constant_forcing",
    "spinup_check",
    "step_cell",
    "step_cells",
]

STATE_VARS = ("swe", "soil_water", "soil_temp", "c_leaf", "c_soil")
HIST_VARS = ("FSNO", "H2OSOI", "TLAI", "TSOI", "QRUNOFF", "GPP")
FREEZE_K = 273.15


@dataclass(frozen=True)
class ToyParams:
    melt_factor: float = 0.2  # mm per K per hour
    w_cap: float = 200.0  # mm
    et_coeff: float = 1e-3  # mm m^2 / (W h)
    temp_tau: float = 48.0  # hours
    gpp_coeff: float = 5e-4  # gC m^2 / (W h)
    alloc: float = 0.5
    k_leaf: float = 1e-4  # per hour
    k_soil: float = 1e-5  # per hour
    lai_per_c: float = 0.02  # m^2 per gC
    snow_cover_scale: float = 10.0  # mm
    rain_snow_threshold: float = FREEZE_K

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"ToyParams.{name} must be positive")


def step_cells(state: dict, forcing: dict, p: ToyParams, dt: float):
    """Advance every cell one step; returns (new state, diagnostics).

    Pure element-wise update: fluxes are computed from the state at step
    start, evapotranspiration is capped by available water, and soil-water
    overflow leaves as runoff, so per cell and step
    precip*dt == d(swe) + d(soil_water) + et + runoff exactly.
    Diagnostics are stacked (len(HIST_VARS), n) in HIST_VARS order.
    """
    tbot = forcing["TBOT"]
    prect = forcing["PRECT"]  # mm/h
    fsds = forcing["FSDS"]
    if np.any(np.isnan(tbot)) or np.any(np.isnan(prect)) or np.any(np.isnan(fsds)):
        bad = np.flatnonzero(np.isnan(np.asarray(tbot) + np.asarray(prect) + np.asarray(fsds)))
        raise ValueError(f"NaN forcing at cells {bad[:5].tolist()}")
    precip = prect * dt
    snow = np.where(tbot < p.rain_snow_threshold, precip, 0.0)
    rain = precip - snow
    melt = np.minimum(state["swe"] + snow, p.melt_factor * np.maximum(tbot - FREEZE_K, 0.0) * dt)
    wet = state["soil_water"] / p.w_cap
    et = np.minimum(p.et_coeff * fsds * wet * dt, state["soil_water"] + rain + melt)
    filled = state["soil_water"] + rain + melt - et
    runoff = np.maximum(filled - p.w_cap, 0.0)
    gpp = p.gpp_coeff * fsds * wet
    new = {
        "swe": state["swe"] + snow - melt,
        "soil_water": filled - runoff,
        "soil_temp": state["soil_temp"] + (tbot - state["soil_temp"]) * (dt / p.temp_tau),
        "c_leaf": state["c_leaf"] + (p.alloc * gpp - p.k_leaf * state["c_leaf"]) * dt,
        "c_soil": state["c_soil"]
        + ((1.0 - p.alloc) * gpp + p.k_leaf * state["c_leaf"] * 0.5 - p.k_soil * state["c_soil"])
        * dt,
    }
    diag = np.stack(
        [
            new["swe"] / (new["swe"] + p.snow_cover_scale),
            new["soil_water"],
            p.lai_per_c * new["c_leaf"],
            new["soil_temp"],
            runoff / dt,
            gpp,
        ]
    )
    return new, diag


def step_cell(state: dict, forcing: dict, p: ToyParams, dt: float):
    """Single-cell convenience wrapper around step_cells."""
    s = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
    f = {k: np.asarray(v, dtype=np.float64) for k, v in forcing.items()}
    new, diag = step_cells(s, f, p, dt)
    return {k: float(v) for k, v in new.items()}, {
        name: float(diag[i]) for i, name in enumerate(HIST_VARS)
    }


def init_state(surface_cols: dict, p: ToyParams, start_month: int) -> dict:
    """Initial per-cell state from surface properties.

    Leaf carbon seeds from the start month's PFT-weighted LAI, soil water
    from the saturated-area fraction, soil carbon from mean clay content.
    """
    lai = (
        surface_cols["MONTHLY_LAI"][start_month - 1]
        * surface_cols["PCT_PFT"]
        / 100.0
    ).sum(axis=0)
    n = lai.shape[0]
    return {
        "swe": np.zeros(n),
        "soil_water": p.w_cap * np.clip(surface_cols["FMAX"], 0.05, 0.95),
        "soil_temp": np.full(n, 275.0),
        "c_leaf": lai / p.lai_per_c,
        "c_soil": 10.0 * surface_cols["PCT_CLAY"].mean(axis=0),
    }


# ---------------------------------------------------------------------------
# Case configuration (flat key = value text with section prefixes)


@dataclass
class CaseConfig:
    name: str = "case"
    compset: str = "I1850-toy"
    domain: str = "domain.nc"
    forcing_dir: str = "forcing"
    surface: str = "surface.nc"
    start: str = "2014-01-01"
    n_days: int = 5
    dt_hours: int = 1
    history_interval: str = "end_of_run"  # end_of_run | daily | hourly | none
    restart_interval: str = "end_of_run"  # end_of_run | none | every:<n>d
    seed: int = 7
    lnd_workers: int = 1
    partition_scheme: str = "round_robin"
    block_size: int = 64
    atm_workers: int = 1
    cpl_workers: int = 1
    n_aggregators: int = 1
    buffer_limit: int = DEFAULT_BUFFER_LIMIT
    params: ToyParams = field(default_factory=ToyParams)

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if self.dt_hours < 1 or 24 % self.dt_hours != 0:
            raise ValueError("dt_hours must divide 24")
        if self.history_interval not in ("end_of_run", "daily", "hourly", "none"):
            raise ValueError(f"bad history_interval {self.history_interval!r}")
        if self.restart_interval not in ("end_of_run", "none") and not re.fullmatch(
            r"every:\d+d", self.restart_interval
        ):
            raise ValueError(f"bad restart_interval {self.restart_interval!r}")
        datetime.date.fromisoformat(self.start)

    @property
    def steps_per_day(self) -> int:
        return 24 // self.dt_hours

    def fingerprint(self) -> str:
        """Digest of the model-relevant configuration (execution layout --
        workers, partitioning, aggregation -- deliberately excluded)."""
        p = self.params
        payload = (
            self.compset,
            self.start,
            self.dt_hours,
            self.seed,
            tuple(getattr(p, f) for f in p.__dataclass_fields__),
        )
        return hashlib.sha256(repr(payload).encode()).hexdigest()[:16]

    _KEYMAP = {
        "case.name": "name",
        "case.compset": "compset",
        "case.domain": "domain",
        "case.forcing_dir": "forcing_dir",
        "case.surface": "surface",
        "case.start": "start",
        "case.n_days": "n_days",
        "case.dt_hours": "dt_hours",
        "case.history_interval": "history_interval",
        "case.restart_interval": "restart_interval",
        "case.seed": "seed",
        "lnd.n_workers": "lnd_workers",
        "lnd.partition": "partition_scheme",
        "lnd.block_size": "block_size",
        "atm.n_workers": "atm_workers",
        "cpl.n_workers": "cpl_workers",
        "io.n_aggregators": "n_aggregators",
        "io.buffer_limit": "buffer_limit",
    }
    _INT_FIELDS = {
        "n_days", "dt_hours", "seed", "lnd_workers", "block_size",
        "atm_workers", "cpl_workers", "n_aggregators", "buffer_limit",
    }

    @classmethod
    def from_file(cls, path: str) -> "CaseConfig":
        kwargs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in cls._KEYMAP:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                name = cls._KEYMAP[key]
                kwargs[name] = int(value) if name in cls._INT_FIELDS else value
        cfg = cls(**kwargs)
        base = os.path.dirname(os.path.abspath(path))
        for attr in ("domain", "forcing_dir", "surface"):
            p = getattr(cfg, attr)
            if not os.path.isabs(p):
                setattr(cfg, attr, os.path.join(base, p))
        return cfg

    def to_file(self, path: str) -> None:
        lines = [f"{k} = {getattr(self, attr)}" for k, attr in self._KEYMAP.items()]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def replace_workers(cfg: CaseConfig, n_workers: int) -> CaseConfig:
    return replace(cfg, lnd_workers=n_workers)


def replicate_case(cfg: CaseConfig, k: int, out_dir: str) -> CaseConfig:
    """Write a k-fold replicated domain next to the outputs and point a
    derived config at it; forcing and surface stay on the base files."""
    if k == 1:
        return cfg
    d = read_domain(cfg.domain)
    big = replicate(d, k)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{cfg.name}_x{k}.domain.nc")
    write_domain(big, path)
    return replace(cfg, name=f"{cfg.name}_x{k}", domain=path)


# ---------------------------------------------------------------------------
# Worker execution


@dataclass
class _WorkerTask:
    worker_id: int
    step_lo: int
    step_hi: int
    dt_hours: float
    params: ToyParams
    forcing_paths: list
    columns: np.ndarray
    state: dict
    sums: np.ndarray
    count: int


def _couple(fields: dict) -> dict:
    """Coupler delivery: unit conversion for the land component.

    Precipitation records are mm per 3-hour bin; the land model consumes a
    rate in mm/h.
    """
    out = dict(fields)
    out["PRECT"] = fields["PRECT"] / 3.0
    return out


def _run_worker_segment(task: _WorkerTask):
    timers = TimerTree(f"worker{task.worker_id}")
    with timers.region("atm"):
        stream = ForcingStream.open(task.forcing_paths, columns=task.columns)
    state = task.state
    sums = task.sums
    count = task.count
    bundle = None
    for step in range(task.step_lo, task.step_hi):
        t = step * task.dt_hours
        with timers.region("atm"):
            fields = stream.fields_at(t)
        with timers.region("cpl"):
            bundle = _couple(fields)
        with timers.region("lnd"):
            state, diag = step_cells(state, bundle, task.params, task.dt_hours)
            sums += diag
            count += 1
    timer_totals = {name: (n.seconds, n.count) for name, n in timers.children.items()}
    return task.worker_id, state, sums, count, bundle, timer_totals


@dataclass
class RunResult:
    out_dir: str
    n_land: int
    history_paths: list
    restart_dates: list
    rpointer_path: str
    timers: TimerTree
    component_seconds: dict
    init_seconds: float
    write_stats: list

    @property
    def latest_restart(self) -> dict:
        with open(self.rpointer_path) as fh:
            entries = dict(
                line.strip().split(" = ", 1) for line in fh if " = " in line
            )
        return entries


def _event_steps(total_steps, steps_per_day, interval, kind):
    if interval == "none":
        return set()
    if interval == "end_of_run":
        return {total_steps}
    if kind == "history" and interval == "daily":
        return set(range(steps_per_day, total_steps + 1, steps_per_day))
    if kind == "history" and interval == "hourly":
        per_hour = max(steps_per_day // 24, 1)
        return set(range(per_hour, total_steps + 1, per_hour))
    m = re.fullmatch(r"every:(\d+)d", interval)
    if kind == "restart" and m:
        per = int(m.group(1)) * steps_per_day
        return set(range(per, total_steps + 1, per))
    raise ValueError(f"bad {kind} interval {interval!r}")


def _date_tag(start: str, hours: float) -> str:
    d0 = datetime.date.fromisoformat(start)
    days, rem = divmod(int(round(hours)), 24)
    return f"{d0 + datetime.timedelta(days=days):%Y-%m-%d}-{rem * 3600:05d}"


def _forcing_paths(forcing_dir: str) -> list:
    paths = glob.glob(os.path.join(forcing_dir, "forcing_*_????-??.nc"))
    def key(p):
        m = re.search(r"(\d{4})-(\d{2})\.nc$", p)
        return (int(m.group(1)), int(m.group(2)))
    paths = sorted(paths, key=key)
    if not paths:
        raise FileNotFoundError(f"no forcing files in {forcing_dir}")
    return paths


def _source_columns(n_land: int, n_copies: int, file_n: int, what: str) -> np.ndarray:
    """Global cell -> column in the base data file."""
    if file_n == n_land:
        return np.arange(n_land)
    n_base = n_land // max(n_copies, 1)
    if n_copies > 1 and file_n == n_base and n_base * n_copies == n_land:
        return np.arange(n_land) % n_base
    raise ValueError(
        f"{what} covers {file_n} cells but the domain has {n_land} "
        f"({n_copies} copies): domain mismatch"
    )


def _crc(arr: np.ndarray, dtype: str) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(arr).astype(dtype).tobytes()):08x}"


class _Run:
    """One simulation run (fresh or resumed)."""

    def __init__(self, cfg: CaseConfig, out_dir: str):
        self.cfg = cfg
        self.out_dir = str(out_dir)
        self.timers = TimerTree("run")
        self.write_stats = []
        self.history_paths = []
        self.restart_dates = []
        self.worker_seconds = {}

    # -- initialization ------------------------------------------------------

    def setup(self, resume_entries=None, extra_days=None):
        cfg = self.cfg
        os.makedirs(self.out_dir, exist_ok=True)
        with self.timers.region("init"):
            self.domain = read_domain(cfg.domain)
            self.n_land = self.domain.n_land
            self.forcing_paths = _forcing_paths(cfg.forcing_dir)
            with cdf.read_file(self.forcing_paths[0]) as f:
                file_n = f.model.dim("gridcell").length
            self.columns = _source_columns(
                self.n_land, self.domain.n_copies, file_n, "forcing"
            )
            surf = read_surface(cfg.surface)
            scols = _source_columns(
                self.n_land, self.domain.n_copies, surf.n_land, "surface"
            )
            surf_cols = {k: v[..., scols] for k, v in surf.values.items()}
            self.part = partition(
                self.n_land, cfg.lnd_workers, cfg.partition_scheme, cfg.block_size
            )
            start_month = datetime.date.fromisoformat(cfg.start).month
            if resume_entries is None:
                self.start_step = 0
                total_days = cfg.n_days
                state = init_state(surf_cols, cfg.params, start_month)
                self.sums = None
                self.count = 0
                self.window_start_hours = 0.0
            else:
                state, total_days = self._load_restart(resume_entries, extra_days)
            self.total_steps = total_days * cfg.steps_per_day
            self.n_days_total = total_days
            # Per-rank slices of the global state/accumulators.
            self.rank_state = [
                {k: state[k][cells].copy() for k in STATE_VARS}
                for cells in self.part.local_lists
            ]
            if self.sums is None:
                self.rank_sums = [
                    np.zeros((len(HIST_VARS), len(cells)))
                    for cells in self.part.local_lists
                ]
            else:
                self.rank_sums = [
                    self.sums[:, cells].copy() for cells in self.part.local_lists
                ]
            resumed = getattr(self, "_resumed_bundle", None)
            self.last_bundle = None if resumed is None else [
                {k: v[cells] for k, v in resumed.items()}
                for cells in self.part.local_lists
            ]
            # Forcing must cover the whole run.
            with cdf.read_file(self.forcing_paths[-1]) as f:
                t_last = f.read("time")[-1]
            end_hours = self.total_steps * cfg.dt_hours
            if end_hours > t_last + 3.0:
                raise ValueError(
                    f"forcing coverage gap: run needs {end_hours}h, files end at "
                    f"{t_last + 3.0}h"
                )

    def _load_restart(self, entries, extra_days):
        cfg = self.cfg
        rdir = entries["dir"]
        with cdf.read_file(os.path.join(rdir, entries["elm_r"])) as f:
            a = f.model.gattrs
            if a["fingerprint"] != cfg.fingerprint():
                raise ValueError("restart bundle comes from a different parameter set")
            if int(a["n_land"]) != self.n_land:
                raise ValueError("restart bundle does not match the domain")
            def verified(name):
                arr = f.read(name)
                want = f.model.var(name).attrs["checksum"]
                if _crc(arr, ">f8") != want:
                    raise ValueError(f"restart integrity: checksum mismatch on {name}")
                return arr

            state = {name: verified(name) for name in STATE_VARS}
            sums = np.stack([verified(f"hsum_{v}") for v in HIST_VARS])
            self.count = int(a["hist_count"])
        with cdf.read_file(os.path.join(rdir, entries["datm_r"])) as f:
            self.start_step = int(f.read("next_step"))
        with cdf.read_file(os.path.join(rdir, entries["rh0"])) as f:
            self.window_start_hours = float(f.read("window_start_hours"))
        with cdf.read_file(os.path.join(rdir, entries["cpl_r"])) as f:
            self._resumed_bundle = {
                name: f.read(f"x2l_{name}") for name in VARIABLES
            }
        self.sums = sums
        done_days = self.start_step // cfg.steps_per_day
        return state, done_days + (extra_days if extra_days is not None else cfg.n_days)

    # -- main loop -----------------------------------------------------------

    def execute(self):
        cfg = self.cfg
        hist_events = _event_steps(
            self.total_steps, cfg.steps_per_day, cfg.history_interval, "history"
        )
        rest_events = _event_steps(
            self.total_steps, cfg.steps_per_day, cfg.restart_interval, "restart"
        )
        boundaries = sorted(
            {self.start_step, self.total_steps}
            | {s for s in hist_events | rest_events if s > self.start_step}
        )
        pool = None
        if cfg.lnd_workers > 1:
            pool = ProcessPoolExecutor(
                max_workers=cfg.lnd_workers,
                mp_context=multiprocessing.get_context("fork"),
            )
        try:
            for lo, hi in zip(boundaries[:-1], boundaries[1:]):
                self._run_segment(lo, hi, pool)
                if hi in hist_events:
                    reset = cfg.history_interval not in ("end_of_run",)
                    self._flush_history(hi, reset=reset)
                if hi in rest_events:
                    self._write_restart(hi)
            if self.start_step == self.total_steps:
                # Zero-step resume: re-fire end-of-run events in place so
                # the bundle (and history) are rewritten identically. A
                # periodic interval that already flushed-and-reset at this
                # boundary has nothing accumulated and must not rewrite.
                if self.total_steps in hist_events and self.count > 0:
                    self._flush_history(self.total_steps, reset=False)
                if self.total_steps in rest_events:
                    self._write_restart(self.total_steps)
        finally:
            if pool is not None:
                pool.shutdown()
        merged = {}
        for region in ("atm", "cpl", "lnd"):
            per_worker = [t.get(region, (0.0, 0))[0] for t in self.worker_seconds.values()]
            merged[region] = max(per_worker) if per_worker else 0.0
            self.timers.add(region, merged[region])
        self._write_iostats()
        self._write_provenance()
        return RunResult(
            out_dir=self.out_dir,
            n_land=self.n_land,
            history_paths=self.history_paths,
            restart_dates=self.restart_dates,
            rpointer_path=os.path.join(self.out_dir, f"rpointer.{cfg.name}"),
            timers=self.timers,
            component_seconds=merged,
            init_seconds=self.timers.total("init"),
            write_stats=self.write_stats,
        )

    def _run_segment(self, lo, hi, pool):
        cfg = self.cfg
        tasks = [
            _WorkerTask(
                worker_id=r,
                step_lo=lo,
                step_hi=hi,
                dt_hours=cfg.dt_hours,
                params=cfg.params,
                forcing_paths=self.forcing_paths,
                columns=self.columns[cells],
                state=self.rank_state[r],
                sums=self.rank_sums[r],
                count=self.count,
            )
            for r, cells in enumerate(self.part.local_lists)
        ]
        if pool is None:
            results = [_run_worker_segment(t) for t in tasks]
        else:
            results = list(pool.map(_run_worker_segment, tasks))
        self.last_bundle = [None] * cfg.lnd_workers
        for worker_id, state, sums, count, bundle, timer_totals in results:
            self.rank_state[worker_id] = state
            self.rank_sums[worker_id] = sums
            self.count = count
            self.last_bundle[worker_id] = bundle
            acc = self.worker_seconds.setdefault(worker_id, {})
            for region, (secs, n) in timer_totals.items():
                old = acc.get(region, (0.0, 0))
                acc[region] = (old[0] + secs, old[1] + n)

    # -- output --------------------------------------------------------------

    def _file_gattrs(self, step):
        cfg = self.cfg
        return {
            "case": cfg.name,
            "compset": cfg.compset,
            "fingerprint": cfg.fingerprint(),
            "start": cfg.start,
            "dt_hours": cfg.dt_hours,
            "n_land": self.n_land,
            "id_space": self.domain.id_space,
            "n_copies": self.domain.n_copies,
            "sim_hours": float(step * cfg.dt_hours),
        }

    def _aggregate_write(self, writer, name, rank_arrays, record=None):
        iod = build_iodecomp(self.part, (self.n_land,))
        plan = make_plan(iod.total_elements, self.cfg.n_aggregators, self.cfg.buffer_limit)
        stats = rearrange_write(rank_arrays, iod, plan, writer, name, record=record)
        self.write_stats.append(stats)

    def _flush_history(self, step, reset: bool):
        cfg = self.cfg
        tag = _date_tag(cfg.start, step * cfg.dt_hours)
        path = os.path.join(self.out_dir, f"{cfg.name}.elm.h0.{tag}.nc")
        model = cdf.CdfModel(variant=cdf.CDF5)
        model.dims = [cdf.Dim("time", 0, unlimited=True), cdf.Dim("gridcell", self.n_land)]
        model.gattrs = self._file_gattrs(step)
        model.gattrs["window_start_hours"] = self.window_start_hours
        model.gattrs["averaging_steps"] = self.count
        model.vars.append(
            cdf.Var("time", cdf.NcType.FLOAT64, ("time",), {"units": "hours since start"})
        )
        units = {
            "FSNO": "1", "H2OSOI": "mm", "TLAI": "m^2/m^2",
            "TSOI": "K", "QRUNOFF": "mm/h", "GPP": "gC/m^2/h",
        }
        for name in HIST_VARS:
            model.vars.append(
                cdf.Var(
                    name, cdf.NcType.FLOAT32, ("time", "gridcell"),
                    {"units": units[name], "cell_method": "time mean"},
                )
            )
        with self.timers.region("io"):
            with open(path, "wb") as fh:
                w = cdf.CdfWriter(fh, model, numrecs=1)
                w.write_full("time", np.array([step * float(cfg.dt_hours)]))
                for i, name in enumerate(HIST_VARS):
                    means = [
                        (sums[i] / self.count).astype(np.float32)
                        for sums in self.rank_sums
                    ]
                    self._aggregate_write(w, name, means, record=0)
                w.close()
        self.history_paths.append(path)
        if reset:
            for sums in self.rank_sums:
                sums[:] = 0.0
            self.count = 0
            self.window_start_hours = step * float(cfg.dt_hours)

    def _write_restart(self, step):
        cfg = self.cfg
        tag = _date_tag(cfg.start, step * cfg.dt_hours)
        iod = build_iodecomp(self.part, (self.n_land,))
        names = {}

        # Land restart: full-precision state plus history accumulators.
        path = os.path.join(self.out_dir, f"{cfg.name}.elm.r.{tag}.nc")
        names["elm_r"] = os.path.basename(path)
        model = cdf.CdfModel(variant=cdf.CDF5)
        model.dims = [cdf.Dim("gridcell", self.n_land)]
        model.gattrs = self._file_gattrs(step)
        model.gattrs["hist_count"] = self.count
        state_rank = {k: [s[k] for s in self.rank_state] for k in STATE_VARS}
        sums_rank = {v: [s[i] for s in self.rank_sums] for i, v in enumerate(HIST_VARS)}
        for name in STATE_VARS:
            checksum = _crc(iod.gather(state_rank[name]), ">f8")
            model.vars.append(
                cdf.Var(name, cdf.NcType.FLOAT64, ("gridcell",), {"checksum": checksum})
            )
        for v in HIST_VARS:
            checksum = _crc(iod.gather(sums_rank[v]), ">f8")
            model.vars.append(
                cdf.Var(f"hsum_{v}", cdf.NcType.FLOAT64, ("gridcell",), {"checksum": checksum})
            )
        with self.timers.region("io"):
            with open(path, "wb") as fh:
                w = cdf.CdfWriter(fh, model, numrecs=0)
                for name in STATE_VARS:
                    self._aggregate_write(w, name, state_rank[name])
                for v in HIST_VARS:
                    self._aggregate_write(w, f"hsum_{v}", sums_rank[v])
                w.close()

        # Coupler restart: last exchanged fields (land-facing units).
        path = os.path.join(self.out_dir, f"{cfg.name}.cpl.r.{tag}.nc")
        names["cpl_r"] = os.path.basename(path)
        model = cdf.CdfModel(variant=cdf.CDF5)
        model.dims = [cdf.Dim("gridcell", self.n_land)]
        model.gattrs = self._file_gattrs(step)
        bundles = self.last_bundle or [None] * cfg.lnd_workers
        for fname in VARIABLES:
            units = "mm/h" if fname == "PRECT" else VARIABLES[fname].units
            model.vars.append(
                cdf.Var(f"x2l_{fname}", cdf.NcType.FLOAT64, ("gridcell",), {"units": units})
            )
        with self.timers.region("io"):
            with open(path, "wb") as fh:
                w = cdf.CdfWriter(fh, model, numrecs=0)
                for fname in VARIABLES:
                    ranks = [b[fname] for b in bundles]
                    self._aggregate_write(w, f"x2l_{fname}", ranks)
                w.close()

        # Data-atmosphere restart: stream position.
        path = os.path.join(self.out_dir, f"{cfg.name}.datm.r.{tag}.nc")
        names["datm_r"] = os.path.basename(path)
        model = cdf.CdfModel(variant=cdf.CDF5)
        model.gattrs = self._file_gattrs(step)
        model.vars.append(cdf.Var("next_step", cdf.NcType.INT64, ()))
        model.vars.append(cdf.Var("t_hours", cdf.NcType.FLOAT64, ()))
        with open(path, "wb") as fh:
            cdf.write_file(
                fh,
                model,
                {"next_step": np.int64(step), "t_hours": np.float64(step * cfg.dt_hours)},
            )

        # Auxiliary restart-history pointer.
        path = os.path.join(self.out_dir, f"{cfg.name}.elm.rh0.{tag}.nc")
        names["rh0"] = os.path.basename(path)
        model = cdf.CdfModel(variant=cdf.CDF5)
        model.gattrs = self._file_gattrs(step)
        model.gattrs["history_interval"] = cfg.history_interval
        model.vars.append(cdf.Var("window_start_hours", cdf.NcType.FLOAT64, ()))
        model.vars.append(cdf.Var("hist_count", cdf.NcType.INT64, ()))
        with open(path, "wb") as fh:
            cdf.write_file(
                fh,
                model,
                {
                    "window_start_hours": np.float64(self.window_start_hours),
                    "hist_count": np.int64(self.count),
                },
            )

        rpointer = os.path.join(self.out_dir, f"rpointer.{cfg.name}")
        with open(rpointer, "w") as fh:
            for key, value in names.items():
                fh.write(f"{key} = {value}\n")
            fh.write(f"date = {tag}\n")
        self.restart_dates.append(tag)

    def _write_iostats(self):
        from .decomp import CSV_HEADER

        path = os.path.join(self.out_dir, f"{self.cfg.name}.iostats.csv")
        with open(path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for stats in self.write_stats:
                fh.write(stats.csv_row(self.cfg.name) + "\n")

    def _write_provenance(self):
        cfg = self.cfg
        path = os.path.join(self.out_dir, f"{cfg.name}.provenance.txt")
        cfg_digest = hashlib.sha256(
            repr({k: getattr(cfg, a) for k, a in cfg._KEYMAP.items()}).encode()
        ).hexdigest()[:16]
        from . import __version__

        with open(path, "w") as fh:
            fh.write(f"config_hash = {cfg_digest}\n")
            fh.write(f"fingerprint = {cfg.fingerprint()}\n")
            fh.write(f"seed = {cfg.seed}\n")
            fh.write(f"version = {__version__}\n")


def run_case(cfg: CaseConfig, out_dir: str) -> RunResult:
    """Run a case from its start date for cfg.n_days; see module docs."""
    run = _Run(cfg, out_dir)
    run.setup()
    return run.execute()


def resume_case(cfg: CaseConfig, out_dir: str, extra_days: int, restart_dir: str | None = None) -> RunResult:
    """Continue a case from its latest restart bundle for `extra_days`.

    State, history accumulators, and the forcing stream position resume
    exactly, so a split run is bit-identical to an uninterrupted one.
    """
    rdir = restart_dir or out_dir
    rpointer = os.path.join(rdir, f"rpointer.{cfg.name}")
    if not os.path.exists(rpointer):
        raise FileNotFoundError(f"no restart pointer at {rpointer}")
    with open(rpointer) as fh:
        entries = dict(line.strip().split(" = ", 1) for line in fh if " = " in line)
    entries["dir"] = rdir
    run = _Run(cfg, out_dir)
    run.setup(resume_entries=entries, extra_days=extra_days)
    return run.execute()


# ---------------------------------------------------------------------------
# Spin-up utilities


def run_constant_forcing(state: dict, fields: dict, p: ToyParams, dt: float, n_steps: int,
                         record_every: int = 0):
    """March one or more cells under constant forcing; optionally record
    pool trajectories every `record_every` steps."""
    forcing = {k: np.asarray(v, dtype=np.float64) for k, v in fields.items()}
    state = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
    track = {"c_leaf": [], "c_soil": []} if record_every else None
    for s in range(n_steps):
        state, _ = step_cells(state, forcing, p, dt)
        if record_every and (s + 1) % record_every == 0:
            track["c_leaf"].append(np.array(state["c_leaf"]))
            track["c_soil"].append(np.array(state["c_soil"]))
    return (state, track) if record_every else state


def leaf_fixed_point(fsds: float, soil_wetness: float, p: ToyParams) -> float:
    """Closed-form leaf-carbon equilibrium under constant forcing:
    c* = alloc * gpp / k_leaf with gpp = gpp_coeff * FSDS * wetness."""
    return p.alloc * p.gpp_coeff * fsds * soil_wetness / p.k_leaf


@dataclass
class SpinupReport:
    rel_change: dict  # pool -> per-cycle-boundary relative change
    converged: dict  # pool -> bool at the tolerance

    def max_change(self, pool: str) -> float:
        seq = self.rel_change[pool]
        return float(seq[-1]) if len(seq) else 0.0


def spinup_check(pool_series: dict, tol: float = 0.01) -> SpinupReport:
    """Year-over-year relative change of pool means across repeated-forcing
    cycles; needs at least two cycles."""
    rel = {}
    conv = {}
    for pool, series in pool_series.items():
        series = np.asarray(series, dtype=np.float64)
        if series.ndim != 1 or series.size < 2:
            raise ValueError("spinup_check needs >= 2 repeated-forcing cycles")
        denom = np.maximum(np.abs(series[1:]), 1e-30)
        rel[pool] = np.abs(np.diff(series)) / denom
        conv[pool] = bool(rel[pool][-1] <= tol)
    return SpinupReport(rel_change=rel, converged=conv)
