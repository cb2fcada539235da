"""Multi-zone scheduling for spatially variable fields.

Two couplings between management zones are supported. In small-scale mode
the equipment reaches every zone the same day, so one shared binary per
day gates all zones: on an event day each zone receives its own boxed
depth, and the fixed charge is paid once per event day. In large-scale
mode the equipment spends one day per zone, so one binary per irrigation
cycle of M consecutive days gates the field: zone j can only be watered
on its stride-M pattern days, and an active cycle forces every zone's
depth box on its respective day.

Both modes expose an exact enumeration/branch-and-bound solve and the
sigmoid-homotopy relaxation with a switch vector shared across zones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonTooLong, IndivisibleHorizon
from .scheduler import (
    InnerSettings,
    Schedule,
    ScheduleProblem,
    SigmoidConfig,
    ZoneSpec,
    _prefer,
    _projected_descent,
    make_dynamics,
    sigmoid,
    solve_continuous,
)

N_EXACT_MAX = 14


@dataclass(frozen=True)
class ManagementZone:
    """One homogeneous sub-field with its own surrogate and target zone."""

    index: int                  # 1-based position in the irrigation cycle
    label: str
    model: object
    zone: ZoneSpec
    u_lo: float
    u_hi: float
    history: np.ndarray         # (lag+1, 5) physical rows

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("zone indices are 1-based cycle positions")
        if not 0 < self.u_lo <= self.u_hi:
            raise ValueError("need 0 < u_lo <= u_hi")


@dataclass(frozen=True)
class SpatialProblem:
    """Field-level problem: ordered zones, shared weather, one mode."""

    zones: tuple
    horizon: int
    rain: np.ndarray            # (N,), shared across zones
    et0: np.ndarray             # (N,), shared across zones
    kc: np.ndarray              # (N, M), per-zone crop coefficients
    mode: str = "small_scale"
    r_c: float = 50.0
    r_u: float = 20.0
    day: int = 0
    n_exact_max: int = N_EXACT_MAX

    def __post_init__(self):
        zones = tuple(self.zones)
        object.__setattr__(self, "zones", zones)
        if not zones:
            raise ValueError("need at least one management zone")
        indices = [z.index for z in zones]
        if sorted(indices) != list(range(1, len(zones) + 1)):
            raise ValueError("zone indices must be the cycle order 1..M")
        if self.mode not in ("small_scale", "large_scale"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n, m = self.horizon, len(zones)
        if self.mode == "large_scale" and n % m != 0:
            raise IndivisibleHorizon(
                f"horizon {n} does not split into whole {m}-day cycles")
        for name in ("rain", "et0"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have horizon length")
            object.__setattr__(self, name, arr)
        kc = np.asarray(self.kc, dtype=float)
        if kc.shape != (n, m):
            raise ValueError(f"kc must be ({n}, {m}), got {kc.shape}")
        object.__setattr__(self, "kc", kc)

    @property
    def n_zones(self):
        return len(self.zones)

    @property
    def n_binaries(self):
        if self.mode == "small_scale":
            return self.horizon
        return self.horizon // self.n_zones

    def slot_day(self, zone_pos: int, b: int) -> int:
        """Horizon day (0-based) of binary slot b for the zone at 1-based
        cycle position zone_pos."""
        if self.mode == "small_scale":
            return b
        return self.n_zones * b + zone_pos - 1

    def zone_problem(self, j: int, r_c: float = 0.0) -> ScheduleProblem:
        """Single-zone view used by the per-zone inner solves."""
        z = self.zones[j]
        forecast = np.column_stack([self.rain, self.kc[:, j], self.et0])
        return ScheduleProblem(
            model=z.model, horizon=self.horizon, history=z.history,
            forecast=forecast, zone=z.zone, r_c=r_c, r_u=self.r_u,
            u_lo=z.u_lo, u_hi=z.u_hi, day=self.day,
            n_exact_max=self.n_exact_max,
        )


def admissible_days(m: int, n: int, zone_index: int, start_day: int = 0):
    """Days on which the zone at cycle position ``zone_index`` may be
    irrigated in large-scale mode: a stride-m progression of n/m days
    beginning at start_day + zone_index - 1."""
    if not 1 <= zone_index <= m:
        raise ValueError(f"zone index must lie in 1..{m}")
    if n % m != 0:
        raise IndivisibleHorizon(f"horizon {n} does not divide into {m}-day cycles")
    n_c = n // m
    return [start_day + zone_index - 1 + m * i for i in range(n_c)]


@dataclass
class FieldSchedule:
    """Field-level decisions plus one per-zone schedule over the horizon."""

    c: np.ndarray               # shared day binaries or cycle binaries
    mode: str
    per_zone: list              # Schedule per zone, day-indexed over N
    cost: float
    cost_zone: float
    cost_fixed: float
    cost_volume: float
    info: dict = field(default_factory=dict)

    @property
    def active_slots(self):
        return tuple(int(b) for b in np.nonzero(self.c)[0])


def _leaf_solve(problem: SpatialProblem, c_bin, zone_problems, zone_dynamics,
                settings: InnerSettings):
    """Best depths for fixed binaries: zones decouple into box solves."""
    n = problem.horizon
    per_zone = []
    zone_cost = 0.0
    volume_cost = 0.0
    for j in range(problem.n_zones):
        c_days = np.zeros(n, dtype=int)
        for b in np.nonzero(c_bin)[0]:
            c_days[problem.slot_day(j + 1, int(b))] = 1
        sched = solve_continuous(zone_problems[j], c_days, zone_dynamics[j], settings)
        per_zone.append(sched)
        zone_cost += sched.cost_zone
        volume_cost += sched.cost_volume
    fixed = problem.r_c * float(np.sum(c_bin))
    total = zone_cost + fixed + volume_cost
    return FieldSchedule(
        c=np.asarray(c_bin, dtype=int).copy(), mode=problem.mode,
        per_zone=per_zone, cost=total, cost_zone=zone_cost,
        cost_fixed=fixed, cost_volume=volume_cost,
    )


def _field_prefer(a: FieldSchedule, b: FieldSchedule, tol=1e-12):
    if a.cost < b.cost - tol:
        return True
    if a.cost > b.cost + tol:
        return False
    ea, eb = a.active_slots, b.active_slots
    if len(ea) != len(eb):
        return len(ea) < len(eb)
    return ea < eb


def _solve_exact(problem: SpatialProblem, settings: InnerSettings):
    n_bin = problem.n_binaries
    if n_bin > problem.n_exact_max:
        raise HorizonTooLong(
            f"{n_bin} binaries exceed the exact-solve cap {problem.n_exact_max}")
    zone_problems = [problem.zone_problem(j) for j in range(problem.n_zones)]
    zone_dynamics = [make_dynamics(p) for p in zone_problems]

    def leaf(c_bin):
        return _leaf_solve(problem, c_bin, zone_problems, zone_dynamics, settings)

    best = None
    leaves = 0
    for k in range(0, min(4, n_bin) + 1):
        c = np.zeros(n_bin, dtype=int)
        c[np.unique(np.round(np.linspace(0, n_bin - 1, k)).astype(int))] = 1 if k else 0
        cand = leaf(c)
        leaves += 1
        if best is None or _field_prefer(cand, best):
            best = cand

    floor = problem.r_c + problem.r_u * sum(z.u_lo for z in problem.zones)
    stack = [(0, 0, [])]
    nodes = 0
    while stack:
        depth, events, prefix = stack.pop()
        nodes += 1
        if events * floor > best.cost + 1e-9:
            continue
        if depth == n_bin:
            cand = leaf(np.array(prefix, dtype=int))
            leaves += 1
            if _field_prefer(cand, best):
                best = cand
            continue
        stack.append((depth + 1, events + 1, prefix + [1]))
        stack.append((depth + 1, events, prefix + [0]))
    best.info.update({"solver": "exact", "nodes": nodes, "leaves": leaves})
    return best


def _solve_homotopy(problem: SpatialProblem, config: SigmoidConfig):
    """Shared-switch relaxation: one r per binary, one s per zone and slot."""
    n_bin = problem.n_binaries
    m = problem.n_zones
    n = problem.horizon
    zone_problems = [problem.zone_problem(j) for j in range(m)]
    zone_dynamics = [make_dynamics(p) for p in zone_problems]
    u_lo = np.array([z.u_lo for z in problem.zones])
    du = np.array([z.u_hi - z.u_lo for z in problem.zones])
    slot_days = np.array([[problem.slot_day(j + 1, b) for b in range(n_bin)]
                          for j in range(m)])

    lower = np.concatenate([np.full(n_bin, config.r_min), np.zeros(m * n_bin)])
    upper = np.concatenate([np.full(n_bin, config.r_max), np.ones(m * n_bin)])

    def unpack(z, beta):
        r = z[:n_bin]
        s = z[n_bin:].reshape(m, n_bin)
        om = sigmoid(r, beta)
        u_var = om[None, :] * (u_lo[:, None] + s * du[:, None])
        return r, s, om, u_var

    def full_u(u_var):
        u = np.zeros((m, n))
        for j in range(m):
            u[j, slot_days[j]] = u_var[j]
        return u

    def make_f(beta):
        def f(z):
            _, _, om, u_var = unpack(z, beta)
            u = full_u(u_var)
            tapes = []
            value = problem.r_c * float(np.sum(om)) + problem.r_u * float(np.sum(u_var))
            for j in range(m):
                heads, tape = zone_dynamics[j].predict_tape(u[j])
                tapes.append((heads, tape))
                value += problem.zones[j].zone.penalty(heads)
            return value, (z, tapes)
        return f

    def make_grad(beta):
        def grad(aux):
            z, tapes = aux
            _, s, om, _ = unpack(z, beta)
            dom = beta * om * (1.0 - om)
            dr = problem.r_c * dom.copy()
            ds = np.zeros((m, n_bin))
            for j in range(m):
                heads, tape = tapes[j]
                w = problem.zones[j].zone.penalty_grad(heads)
                dj_du_full = zone_dynamics[j].vjp(tape, w) + problem.r_u
                dj_du = dj_du_full[slot_days[j]]
                dr += dj_du * dom * (u_lo[j] + s[j] * du[j])
                ds[j] = dj_du * om * du[j]
            return np.concatenate([dr, ds.ravel()])
        return grad

    beta = config.beta0
    warm = None
    trace = []
    converged = False
    last_c = None
    for _ in range(config.max_iterations):
        f = make_f(beta)
        grad = make_grad(beta)
        if warm is not None:
            starts = [warm]
        else:
            starts = [np.concatenate([np.zeros(n_bin), np.full(m * n_bin, frac)])
                      for frac in (0.5, 0.25, 1.0)][: max(1, config.inner.multistart)]
        best = None
        for z0 in starts:
            z, fz, aux, _, _ = _projected_descent(f, grad, z0, lower, upper, config.inner)
            if best is None or fz < best[1]:
                best = (z, fz)
        z, fz = best
        om = sigmoid(z[:n_bin], beta)
        c = (om > 0.5).astype(int)
        dist = float(np.linalg.norm(om - c))
        trace.append({"beta": beta, "relaxed_cost": fz, "distance": dist})
        last_c = c
        if dist <= config.zeta:
            converged = True
            break
        warm = z
        beta *= config.tau

    zone_problems_r = zone_problems
    zone_dyn_r = zone_dynamics

    def leaf(c_bin):
        return _leaf_solve(problem, c_bin, zone_problems_r, zone_dyn_r, config.inner)

    result = leaf(last_c)
    flips = 0
    if config.polish_flips:
        improved = True
        while improved and flips < 6:
            improved = False
            candidates = []
            for k in range(n_bin):
                c2 = result.c.copy()
                c2[k] = 1 - c2[k]
                candidates.append(c2)
            for a in np.nonzero(result.c)[0]:
                for b in np.nonzero(result.c == 0)[0]:
                    c2 = result.c.copy()
                    c2[a], c2[b] = 0, 1
                    candidates.append(c2)
            for c2 in candidates:
                cand = leaf(c2)
                if _field_prefer(cand, result):
                    result = cand
                    flips += 1
                    improved = True
                    break
    result.info.update({
        "solver": "homotopy", "converged": converged,
        "iterations": len(trace), "final_beta": trace[-1]["beta"],
        "final_distance": trace[-1]["distance"], "polish_flips": flips,
        "trace": trace,
    })
    return result


def solve_small_scale(problem: SpatialProblem, method="homotopy",
                      config: SigmoidConfig = SigmoidConfig(),
                      settings: InnerSettings = InnerSettings()):
    """One shared event binary per day; every zone waters on event days."""
    if problem.mode != "small_scale":
        raise ValueError("problem mode must be small_scale")
    if method == "exact":
        return _solve_exact(problem, settings)
    return _solve_homotopy(problem, config)


def solve_large_scale(problem: SpatialProblem, method="homotopy",
                      config: SigmoidConfig = SigmoidConfig(),
                      settings: InnerSettings = InnerSettings()):
    """One binary per M-day cycle; zones water on their pattern days only."""
    if problem.mode != "large_scale":
        raise ValueError("problem mode must be large_scale")
    if method == "exact":
        return _solve_exact(problem, settings)
    return _solve_homotopy(problem, config)
