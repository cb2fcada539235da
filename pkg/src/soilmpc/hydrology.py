"""Soil-water constitutive relations and a 1D vertical moisture simulator.

Conventions used throughout the package:

* depth ``s`` is measured positive downward from the soil surface [mm],
* water fluxes are positive downward [mm/day],
* capillary pressure head ``psi`` is negative in unsaturated soil [mm],
* time is measured in days.

The simulator integrates the pressure-head form of the vertical
soil-moisture equation with backward Euler in time, Newton iteration and
tridiagonal linear solves. Storage is handled in mixed form (water content
in the residual, capacity in the Jacobian) so that every converged step
conserves mass to the Newton tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import DepthNotOnGrid, NonConvergence

M_PER_S_TO_MM_PER_DAY = 8.64e7
PER_M_TO_PER_MM = 1e-3

#: Default internal solver step, 6 minutes.
DEFAULT_SUBSTEP_DAYS = 1.0 / 240.0


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HydraulicParams:
    """van Genuchten-Mualem constants for one soil, in mm/day units.

    ``Ks`` saturated conductivity [mm/day], ``theta_s``/``theta_r``
    saturated and residual water content [-], ``alpha_vg`` inverse
    air-entry [1/mm], ``n_vg`` pore-size index [-]. ``m_vg`` is derived.
    """

    Ks: float
    theta_s: float
    theta_r: float
    alpha_vg: float
    n_vg: float
    m_vg: float = field(init=False)

    def __post_init__(self):
        if not self.Ks > 0:
            raise ValueError(f"Ks must be positive, got {self.Ks}")
        if not (0 <= self.theta_r < self.theta_s <= 1):
            raise ValueError(
                f"need 0 <= theta_r < theta_s <= 1, got {self.theta_r}, {self.theta_s}"
            )
        if not self.n_vg > 1:
            raise ValueError(f"n_vg must exceed 1, got {self.n_vg}")
        if not self.alpha_vg > 0:
            raise ValueError(f"alpha_vg must be positive, got {self.alpha_vg}")
        object.__setattr__(self, "m_vg", 1.0 - 1.0 / self.n_vg)

    @classmethod
    def from_si(cls, ks_m_per_s, theta_s, theta_r, alpha_per_m, n):
        """Build from the catalog units (Ks in m/s, alpha in 1/m)."""
        return cls(
            Ks=ks_m_per_s * M_PER_S_TO_MM_PER_DAY,
            theta_s=theta_s,
            theta_r=theta_r,
            alpha_vg=alpha_per_m * PER_M_TO_PER_MM,
            n_vg=n,
        )


#: Hydraulic constants of the three catalog soils (converted at load time).
SOIL_CATALOG = {
    "loam": HydraulicParams.from_si(2.889e-6, 0.430, 0.078, 3.600, 1.56),
    "loamy_sand": HydraulicParams.from_si(4.053e-5, 0.410, 0.057, 12.40, 2.28),
    "sand": HydraulicParams.from_si(8.250e-5, 0.430, 0.045, 14.50, 2.68),
}


def soil_params(name: str) -> HydraulicParams:
    try:
        return SOIL_CATALOG[name]
    except KeyError:
        raise KeyError(
            f"unknown soil {name!r}; catalog has {sorted(SOIL_CATALOG)}"
        ) from None


@dataclass(frozen=True)
class FeddesParams:
    """Thresholds of the piecewise-linear root uptake stress curve [mm].

    Uptake is zero at or above ``psi_anaer`` (waterlogged) and at or below
    ``psi_wilt`` (wilting), one between ``psi_opt_hi`` and ``psi_opt_lo``,
    and linear on the two ramps. ``zr`` is the rooting depth [mm].
    """

    psi_anaer: float = -50.0
    psi_opt_hi: float = -250.0
    psi_opt_lo: float = -4000.0
    psi_wilt: float = -15000.0
    zr: float = 500.0
    root_distribution: str = "uniform"

    def __post_init__(self):
        if not (self.psi_anaer > self.psi_opt_hi > self.psi_opt_lo > self.psi_wilt):
            raise ValueError("stress thresholds must decrease from anaer to wilt")
        if not self.zr > 0:
            raise ValueError("rooting depth must be positive")
        if self.root_distribution != "uniform":
            raise ValueError(f"unsupported root distribution {self.root_distribution!r}")


@dataclass(frozen=True)
class SoilColumn:
    """Uniformly discretized homogeneous soil column.

    Nodes sit at the bottom of ``n_nodes`` equal compartments, so node k is
    at depth (k+1) * depth_mm / n_nodes and the last node is at the column
    bottom where free drainage applies.
    """

    depth_mm: float
    n_nodes: int
    params: HydraulicParams
    feddes: FeddesParams = FeddesParams()
    node_depths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_nodes < 3:
            raise ValueError("need at least 3 nodes")
        if not self.depth_mm > 0:
            raise ValueError("column depth must be positive")
        dz = self.depth_mm / self.n_nodes
        depths = (np.arange(self.n_nodes) + 1.0) * dz
        depths.flags.writeable = False
        object.__setattr__(self, "node_depths", depths)

    @property
    def dz(self) -> float:
        return self.depth_mm / self.n_nodes

    def node_at_depth(self, depth_mm: float, tol: float = 1e-9) -> int:
        """Index of the node at ``depth_mm``, or DepthNotOnGrid."""
        hits = np.nonzero(np.abs(self.node_depths - depth_mm) <= tol)[0]
        if hits.size == 0:
            raise DepthNotOnGrid(
                f"depth {depth_mm} mm is not a node of the {self.n_nodes}-node grid"
            )
        return int(hits[0])


@dataclass
class ColumnState:
    """Pressure-head profile [mm] at simulation time t [day]."""

    psi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        if not np.all(np.isfinite(self.psi)):
            raise ValueError("pressure heads must be finite")


@dataclass(frozen=True)
class DailyInput:
    """One day of forcing: irrigation and rain [mm/day], reference ET
    [mm/day] and crop coefficient [-]."""

    u_irrig: float = 0.0
    rain: float = 0.0
    et0: float = 0.0
    kc: float = 0.0

    def __post_init__(self):
        if self.u_irrig < 0 or self.rain < 0 or self.et0 < 0:
            raise ValueError("irrigation, rain and ET must be nonnegative")
        if not 0.0 <= self.kc <= 1.0:
            raise ValueError(f"crop coefficient must lie in [0, 1], got {self.kc}")

    @property
    def surface_flux(self) -> float:
        return self.u_irrig + self.rain


# ---------------------------------------------------------------------------
# constitutive relations
# ---------------------------------------------------------------------------

def _saturation(psi, p: HydraulicParams):
    """Effective saturation Se and the dry-range power beta = (alpha*|psi|)^n."""
    psi = np.asarray(psi, dtype=float)
    wet = psi >= 0.0
    beta = np.where(wet, 0.0, (p.alpha_vg * np.abs(psi)) ** p.n_vg)
    se = np.exp(-p.m_vg * np.log1p(beta))
    return np.where(wet, 1.0, se), beta, wet


def water_content(psi, p: HydraulicParams):
    """Volumetric water content theta(psi) [m3/m3]."""
    se, _, _ = _saturation(psi, p)
    return p.theta_r + (p.theta_s - p.theta_r) * se


def hydraulic_conductivity(psi, p: HydraulicParams):
    """Unsaturated conductivity K(psi) [mm/day], Mualem form."""
    se, _, wet = _saturation(psi, p)
    # 1 - (1 - Se^(1/m))^m, written to survive Se -> 1 without cancellation
    w = np.where(wet, 0.0, se ** (1.0 / p.m_vg))
    g = -np.expm1(p.m_vg * np.log1p(-w))
    k = p.Ks * np.sqrt(se) * g ** 2
    return np.where(wet, p.Ks, k)


def capillary_capacity(psi, p: HydraulicParams):
    """Capacity c(psi) = d theta / d psi [1/mm]; zero at and above saturation."""
    psi = np.asarray(psi, dtype=float)
    _, beta, wet = _saturation(psi, p)
    a, n, m = p.alpha_vg, p.n_vg, p.m_vg
    with np.errstate(divide="ignore", invalid="ignore"):
        dse = a * n * m * beta ** m * np.exp(-(m + 1.0) * np.log1p(beta))
    return np.where(wet, 0.0, (p.theta_s - p.theta_r) * dse)


def _conductivity_and_slope(psi, p: HydraulicParams):
    """K(psi) and dK/dpsi together, for the Newton Jacobian."""
    _, k, dk, _ = _hydraulics_full(psi, p)
    return k, dk


def _hydraulics_full(psi, p: HydraulicParams):
    """theta, K, dK/dpsi and c(psi) from a single saturation evaluation."""
    psi = np.asarray(psi, dtype=float)
    se, beta, wet = _saturation(psi, p)
    m = p.m_vg
    w = np.where(wet, 0.0, se ** (1.0 / m))
    g = -np.expm1(m * np.log1p(-w))
    sqrt_se = np.sqrt(se)
    k = np.where(wet, p.Ks, p.Ks * sqrt_se * g ** 2)

    theta = p.theta_r + (p.theta_s - p.theta_r) * se
    dse = p.alpha_vg * p.n_vg * m * beta ** m * np.exp(-(m + 1.0) * np.log1p(beta))
    cap = np.where(wet, 0.0, (p.theta_s - p.theta_r) * dse)
    # dG/dSe = (1-w)^(m-1) * Se^(1/m - 1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dg_dse = (1.0 - w) ** (m - 1.0) * se ** (1.0 / m - 1.0)
        dk_dse = p.Ks * (0.5 / sqrt_se * g ** 2 + 2.0 * sqrt_se * g * dg_dse)
    dk = np.where(wet, 0.0, dk_dse * dse)
    dk = np.where(np.isfinite(dk), dk, 0.0)
    return theta, k, dk, cap


def feddes_stress(psi, f: FeddesParams):
    """Dimensionless uptake reduction factor alpha(psi) in [0, 1]."""
    psi = np.asarray(psi, dtype=float)
    up = (f.psi_anaer - psi) / (f.psi_anaer - f.psi_opt_hi)
    down = (psi - f.psi_wilt) / (f.psi_opt_lo - f.psi_wilt)
    return np.clip(np.minimum(up, down), 0.0, 1.0)


def _feddes_slope(psi, f: FeddesParams):
    """Derivative of the stress curve, zero on plateaus."""
    psi = np.asarray(psi, dtype=float)
    slope = np.zeros_like(psi)
    on_wet_ramp = (psi > f.psi_opt_hi) & (psi < f.psi_anaer)
    on_dry_ramp = (psi > f.psi_wilt) & (psi < f.psi_opt_lo)
    slope[on_wet_ramp] = -1.0 / (f.psi_anaer - f.psi_opt_hi)
    slope[on_dry_ramp] = 1.0 / (f.psi_opt_lo - f.psi_wilt)
    return slope


def sink_term(psi, inp: DailyInput, f: FeddesParams, z):
    """Root extraction rate S [1/day] at depth z [mm] (uniform roots)."""
    rate = inp.kc * inp.et0 / f.zr
    in_roots = np.asarray(z, dtype=float) <= f.zr
    return np.where(in_roots, feddes_stress(psi, f) * rate, 0.0)


# ---------------------------------------------------------------------------
# implicit step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    """New state plus the time-integrated boundary fluxes of the step [mm]."""

    state: ColumnState
    inflow: float
    drainage: float
    transpiration: float
    newton_iterations: int


def equilibrium_profile(column: SoilColumn, psi_bottom: float) -> np.ndarray:
    """No-flow hydrostatic profile anchored at the bottom node."""
    return psi_bottom - (column.depth_mm - column.node_depths)


def _solve_implicit(column, psi_old, inp, dt, tol, max_iter):
    """One backward-Euler solve of length dt. Returns psi_new or None."""
    p, f = column.params, column.feddes
    dz = column.dz
    n = column.n_nodes
    in_roots = column.node_depths <= f.zr
    uptake_rate = inp.kc * inp.et0 / f.zr
    q_top = inp.surface_flux
    theta_old = water_content(psi_old, p)
    dz_dt = dz / dt

    def assemble(psi):
        """Residual plus everything the Jacobian needs, one pass."""
        theta, k, dk, cap = _hydraulics_full(psi, p)
        kh = 0.5 * (k[:-1] + k[1:])
        grad = 1.0 - np.diff(psi) / dz
        q_inner = kh * grad
        sink = np.where(in_roots, feddes_stress(psi, f) * uptake_rate, 0.0)
        res = (theta - theta_old) * dz_dt + sink * dz
        res[0] -= q_top - q_inner[0]
        res[1:-1] -= q_inner[:-1] - q_inner[1:]
        res[-1] -= q_inner[-1] - k[-1]
        return res, sink, k, dk, cap, kh, grad

    psi = psi_old.copy()
    res, sink, k, dk, cap, kh, grad = assemble(psi)
    best_norm = np.max(np.abs(res))
    it = 0
    while it < max_iter:
        if best_norm < tol:
            drainage = k[-1] * dt
            return psi, float(drainage), float(np.sum(sink) * dz * dt), it
        it += 1

        # flux j couples nodes j and j+1: q_j = kh_j * grad_j
        dq_dlo = 0.5 * dk[:-1] * grad + kh / dz     # d q_j / d psi_j
        dq_dhi = 0.5 * dk[1:] * grad - kh / dz      # d q_j / d psi_{j+1}
        dsink = np.where(in_roots, _feddes_slope(psi, f) * uptake_rate, 0.0)

        diag = cap * dz_dt + dsink * dz
        diag[:-1] += dq_dlo
        diag[1:] -= dq_dhi
        diag[-1] += dk[-1]

        ab = np.zeros((3, n))
        ab[0, 1:] = dq_dhi       # dF_j / d psi_{j+1}
        ab[1, :] = diag
        ab[2, :-1] = -dq_dlo     # dF_{j+1} / d psi_j
        try:
            delta = solve_banded((1, 1), ab, -res)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(delta)):
            return None

        # damped update: keep the first trial that does not worsen the residual
        scale = 1.0
        for _ in range(12):
            trial = psi + scale * delta
            parts = assemble(trial)
            trial_norm = np.max(np.abs(parts[0]))
            if np.isfinite(trial_norm) and trial_norm < best_norm:
                psi, best_norm = trial, trial_norm
                res, sink, k, dk, cap, kh, grad = parts
                break
            scale *= 0.5
        else:
            return None
    if best_norm < tol:
        drainage = k[-1] * dt
        return psi, float(drainage), float(np.sum(sink) * dz * dt), it
    return None


def step(
    column: SoilColumn,
    state: ColumnState,
    inp: DailyInput,
    dt: float,
    *,
    tol_newton: float = 1e-10,
    max_newton: int = 40,
    dt_min: float = 1e-7,
) -> StepResult:
    """Advance the column by dt [day] under constant forcing.

    Solves the implicit system for the new head profile with a free-drainage
    bottom boundary and the prescribed surface flux irrigation + rain. If
    Newton fails the interval is halved recursively; NonConvergence is
    raised once sub-steps reach dt_min.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    psi = state.psi.copy()
    inflow = drainage = transpiration = 0.0
    iterations = 0
    remaining = [dt]  # stack of interval lengths, earliest on top
    while remaining:
        sub_dt = remaining.pop()
        out = _solve_implicit(column, psi, inp, sub_dt, tol_newton, max_newton)
        if out is None:
            if sub_dt * 0.5 < dt_min:
                raise NonConvergence(
                    f"implicit step failed at dt={sub_dt:g} day "
                    f"(floor {dt_min:g}); conditions too extreme",
                    day=state.t,
                )
            remaining.append(sub_dt * 0.5)  # second half, solved later
            remaining.append(sub_dt * 0.5)  # first half, solved next
            continue
        psi, sub_drain, sub_sink, its = out
        inflow += inp.surface_flux * sub_dt
        drainage += sub_drain
        transpiration += sub_sink
        iterations += its
    return StepResult(
        state=ColumnState(psi=psi, t=state.t + dt),
        inflow=inflow,
        drainage=drainage,
        transpiration=transpiration,
        newton_iterations=iterations,
    )


# ---------------------------------------------------------------------------
# multi-day simulation
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Recorded heads plus exact endpoint states and integrated fluxes.

    ``psi`` holds the recorded (possibly noise-corrupted) profiles, one row
    per entry of ``times``; the exact initial and final profiles are kept
    separately so mass-balance checks are independent of recording noise.
    """

    column: SoilColumn
    times: np.ndarray
    psi: np.ndarray
    psi_initial: np.ndarray
    psi_final: np.ndarray
    inflow_mm: float
    drainage_mm: float
    transpiration_mm: float
    record_dt: float

    def storage(self, psi=None) -> float:
        """Column water storage [mm] for a profile (default: exact final)."""
        profile = self.psi_final if psi is None else psi
        return float(np.sum(water_content(profile, self.column.params)) * self.column.dz)

    def node_series(self, node: int) -> np.ndarray:
        return self.psi[:, node]

    def to_csv(self, path):
        header = "t_day," + ",".join(f"node_{k}" for k in range(self.column.n_nodes))
        lines = [header]
        for t, row in zip(self.times, self.psi):
            lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def simulate(
    column: SoilColumn,
    psi_initial,
    inputs,
    *,
    noise_std: float = 0.0,
    rng_seed: int = 0,
    record_dt: float = DEFAULT_SUBSTEP_DAYS,
    tol_newton: float = 1e-10,
    max_substep: float = DEFAULT_SUBSTEP_DAYS,
) -> Trajectory:
    """Run the column for len(inputs) days of piecewise-constant forcing.

    Heads are recorded every ``record_dt``; the solver advances in steps no
    longer than ``max_substep`` (6 minutes by default). Recorded heads carry
    additive zero-mean Gaussian noise of ``noise_std`` [mm]; the underlying
    integration is exact. Deterministic for a fixed seed.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("need at least one day of inputs")
    rec_per_day = round(1.0 / record_dt)
    if rec_per_day < 1 or abs(rec_per_day * record_dt - 1.0) > 1e-9:
        raise ValueError("record_dt must divide one day")
    sub_per_rec = max(1, math.ceil(record_dt / max_substep - 1e-12))

    rng = np.random.default_rng(rng_seed)
    psi0 = np.asarray(psi_initial, dtype=float)
    if psi0.shape != (column.n_nodes,):
        raise ValueError("initial profile length must match the node count")

    state = ColumnState(psi=psi0.copy(), t=0.0)
    n_records = len(inputs) * rec_per_day + 1
    times = np.empty(n_records)
    recorded = np.empty((n_records, column.n_nodes))

    def record(idx, t, psi):
        times[idx] = t
        if noise_std > 0:
            recorded[idx] = psi + rng.normal(0.0, noise_std, size=psi.shape)
        else:
            recorded[idx] = psi

    record(0, 0.0, state.psi)
    inflow = drainage = transpiration = 0.0
    solver_dt = record_dt / sub_per_rec  # never above 6 minutes
    idx = 1
    for day, inp in enumerate(inputs):
        for r in range(rec_per_day):
            for _ in range(sub_per_rec):
                try:
                    result = step(
                        column, state, inp, solver_dt,
                        tol_newton=tol_newton,
                        dt_min=solver_dt / 1024.0,
                    )
                except NonConvergence as err:
                    raise NonConvergence(str(err), day=state.t) from None
                state = result.state
                inflow += result.inflow
                drainage += result.drainage
                transpiration += result.transpiration
            # keep the recording grid exact
            state.t = day + (r + 1) * record_dt
            record(idx, state.t, state.psi)
            idx += 1
    return Trajectory(
        column=column,
        times=times,
        psi=recorded,
        psi_initial=psi0.copy(),
        psi_final=state.psi.copy(),
        inflow_mm=inflow,
        drainage_mm=drainage,
        transpiration_mm=transpiration,
        record_dt=record_dt,
    )
