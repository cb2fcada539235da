"""Open-loop simulation campaigns and the daily supervised dataset.

A campaign drives the soil column with randomized daily forcing: irrigation
arrives in events separated by random gaps, rain either falls every day or
in its own events, and ET0 / crop coefficient are drawn fresh each day. The
recorded trajectory is condensed to one record per day at the sensor node.

Record alignment: record t pairs the head measured at the end of day t
(time t in whole days, record 0 being the initial state) with the forcing
applied over the following day (t, t+1]. A supervised window therefore
feeds the model rows whose irrigation entries are exactly the decisions a
scheduler would still be free to make, and the target of the window ending
at record t is record t+1's head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import hydrology as hy
from .errors import InsufficientData
from .serialize import decode_array, dump_json, encode_array, load_json

CHANNELS = ("x", "u_irrig", "rain", "kc", "et0")
DATASET_FORMAT = "soilmpc-dataset-v1"


@dataclass(frozen=True)
class CampaignConfig:
    """Settings of one open-loop data-generation run."""

    soil: str = "loamy_sand"
    sim_days: int = 1200
    irrigation_range: tuple = (1.4, 15.6)
    rain_range: tuple = (1.04, 7.0)
    et0_range: tuple = (1.04, 3.0)
    kc_range: tuple = (0.50, 0.88)
    gap_range: tuple = (2, 6)
    rain_gap_range: tuple | None = None  # None: rain falls every day
    noise_std: float = 1.0
    seed: int = 0
    record_dt: float = hy.DEFAULT_SUBSTEP_DAYS
    solver_substep: float = hy.DEFAULT_SUBSTEP_DAYS
    initial_psi: float = -180.0
    column_depth: float = 600.0
    n_nodes: int = 30
    sensor_depth: float = 500.0

    def __post_init__(self):
        if self.sim_days < 30:
            raise ValueError("campaigns shorter than 30 days are not useful")
        for name in ("irrigation_range", "rain_range", "et0_range", "kc_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} must be nonnegative and ordered, got {lo}, {hi}")
        lo, hi = self.gap_range
        if not (1 <= lo <= hi):
            raise ValueError("gap range must be ordered and at least one day")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def column(self) -> hy.SoilColumn:
        return hy.SoilColumn(self.column_depth, self.n_nodes, hy.soil_params(self.soil))


@dataclass(frozen=True)
class DailyRecord:
    """End-of-day head [mm] plus the next day's forcing."""

    day: int
    x: float
    u_irrig: float
    rain: float
    et0: float
    kc: float


@dataclass
class CampaignResult:
    """Raw trajectory plus the daily input log that produced it."""

    config: CampaignConfig
    column: hy.SoilColumn
    trajectory: hy.Trajectory
    inputs: list  # one DailyInput per simulated day


def _draw_daily_inputs(config: CampaignConfig, rng) -> list:
    irrigation_gap = int(rng.integers(config.gap_range[0], config.gap_range[1] + 1))
    rain_gap = None
    if config.rain_gap_range is not None:
        rain_gap = int(rng.integers(config.rain_gap_range[0], config.rain_gap_range[1] + 1))
    inputs = []
    for _ in range(config.sim_days):
        u = 0.0
        if irrigation_gap == 0:
            u = float(rng.uniform(*config.irrigation_range))
            irrigation_gap = int(rng.integers(config.gap_range[0], config.gap_range[1] + 1))
        irrigation_gap -= 1

        if config.rain_gap_range is None:
            r = float(rng.uniform(*config.rain_range))
        else:
            r = 0.0
            if rain_gap == 0:
                r = float(rng.uniform(*config.rain_range))
                rain_gap = int(rng.integers(config.rain_gap_range[0], config.rain_gap_range[1] + 1))
            rain_gap -= 1

        inputs.append(hy.DailyInput(
            u_irrig=u,
            rain=r,
            et0=float(rng.uniform(*config.et0_range)),
            kc=float(rng.uniform(*config.kc_range)),
        ))
    return inputs


def run_campaign(config: CampaignConfig) -> CampaignResult:
    """Simulate the configured column under randomized daily forcing."""
    rng = np.random.default_rng(config.seed)
    inputs = _draw_daily_inputs(config, rng)
    column = config.column()
    trajectory = hy.simulate(
        column,
        np.full(column.n_nodes, config.initial_psi),
        inputs,
        noise_std=config.noise_std,
        rng_seed=int(rng.integers(0, 2**63 - 1)),
        record_dt=config.record_dt,
        max_substep=config.solver_substep,
    )
    return CampaignResult(config=config, column=column, trajectory=trajectory, inputs=inputs)


def to_daily_root_zone(result: CampaignResult, sensor_depth: float) -> list:
    """Condense a campaign to daily records at the sensor node.

    The head of record t is the last recorded sample of day t; its input
    fields are the forcing of the following day, matching how a scheduler
    measures first and acts second. The final day's closing head has no
    following forcing and is dropped.
    """
    node = result.column.node_at_depth(sensor_depth)
    traj = result.trajectory
    per_day = round(1.0 / traj.record_dt)
    records = []
    for t, inp in enumerate(result.inputs):
        head = float(traj.psi[t * per_day, node])
        records.append(DailyRecord(
            day=t, x=head,
            u_irrig=inp.u_irrig, rain=inp.rain, et0=inp.et0, kc=inp.kc,
        ))
    return records


# ---------------------------------------------------------------------------
# supervised dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-channel min/max fitted on the training split."""

    mins: np.ndarray
    maxs: np.ndarray

    @property
    def spans(self) -> np.ndarray:
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def normalize_rows(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=float) - self.mins) / self.spans

    def normalize_head(self, x):
        return (x - self.mins[0]) / self.spans[0]

    def denormalize_head(self, xn):
        return self.mins[0] + xn * self.spans[0]

    @property
    def head_span(self) -> float:
        return float(self.spans[0])


def records_to_array(records) -> np.ndarray:
    out = np.empty((len(records), 6))
    for i, r in enumerate(records):
        out[i] = (r.day, r.x, r.u_irrig, r.rain, r.kc, r.et0)
    return out


@dataclass
class SupervisedDataset:
    """Lagged windows of [x, u_irrig, rain, kc, et0] with next-day targets."""

    records: np.ndarray        # (D, 6): day, then the five channels
    lag: int
    stats: NormStats
    split_bounds: tuple        # record indices (train_end, val_end)
    channel_order: tuple = CHANNELS
    meta: dict = field(default_factory=dict)

    def _windows(self, lo, hi):
        """Windows fully inside records [lo, hi); arrays X, y, target_day."""
        rows = self.stats.normalize_rows(self.records[:, 1:6])
        n = hi - lo - self.lag - 1
        if n <= 0:
            l1 = self.lag + 1
            return (np.empty((0, l1, 5)), np.empty((0,)), np.empty((0,), dtype=int))
        xs, ys, days = [], [], []
        for t in range(lo + self.lag, hi - 1):
            xs.append(rows[t - self.lag: t + 1])
            ys.append(rows[t + 1, 0])
            days.append(int(self.records[t + 1, 0]))
        return np.array(xs), np.array(ys), np.array(days, dtype=int)

    def split(self, name):
        train_end, val_end = self.split_bounds
        lo, hi = {
            "train": (0, train_end),
            "val": (train_end, val_end),
            "test": (val_end, len(self.records)),
        }[name]
        return self._windows(lo, hi)

    def save(self, path):
        dump_json({
            "format": DATASET_FORMAT,
            "lag": self.lag,
            "channel_order": list(self.channel_order),
            "split_bounds": list(self.split_bounds),
            "mins": encode_array(self.stats.mins),
            "maxs": encode_array(self.stats.maxs),
            "records": encode_array(self.records),
            "meta": self.meta,
        }, path)

    @classmethod
    def load(cls, path):
        d = load_json(path)
        if d.get("format") != DATASET_FORMAT:
            raise ValueError(f"not a {DATASET_FORMAT} file: {path}")
        return cls(
            records=decode_array(d["records"]),
            lag=int(d["lag"]),
            stats=NormStats(decode_array(d["mins"]), decode_array(d["maxs"])),
            split_bounds=tuple(d["split_bounds"]),
            channel_order=tuple(d["channel_order"]),
            meta=d.get("meta", {}),
        )


def build_supervised(records, lag: int, splits=(0.70, 0.15, 0.15), meta=None) -> SupervisedDataset:
    """Chronological train/val/test dataset with train-fitted normalization.

    Splitting happens on the daily records; windows never straddle a split
    boundary, so the few windows that would are simply not formed.
    """
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to one")
    arr = records if isinstance(records, np.ndarray) else records_to_array(records)
    n = len(arr)
    if n <= lag + 1:
        raise InsufficientData(f"{n} records cannot fill a lag-{lag} window plus target")
    train_end = int(np.floor(n * splits[0]))
    val_end = int(np.floor(n * (splits[0] + splits[1])))
    if train_end <= lag + 1:
        raise InsufficientData("training split too small for the requested lag")
    train_rows = arr[:train_end, 1:6]
    stats = NormStats(mins=train_rows.min(axis=0), maxs=train_rows.max(axis=0))
    return SupervisedDataset(
        records=arr,
        lag=lag,
        stats=stats,
        split_bounds=(train_end, val_end),
        meta=dict(meta or {}),
    )


def campaign_dataset(config: CampaignConfig, lag: int = 4, splits=(0.70, 0.15, 0.15)) -> SupervisedDataset:
    """Campaign, resampling and window construction in one call."""
    result = run_campaign(config)
    records = to_daily_root_zone(result, config.sensor_depth)
    meta = {"campaign": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(config).items()}}
    return build_supervised(records, lag, splits, meta=meta)
