"""Daily irrigate/skip scheduling for a single field.

The problem: choose binary decisions c_k and depths u_k over an N-day
horizon to keep the predicted root-zone head inside a target zone, paying
quadratic penalties for zone violations, a fixed charge per irrigation
event and a volumetric water price. Depths are boxed to [u_lo, u_hi] on
event days and forced to zero otherwise.

Two solvers are provided. The exact one searches the binary tree depth
first with an admissible per-event cost floor and evaluates leaves with a
projected-gradient inner solve. The relaxed one replaces each binary with
a steep logistic switch, reparameterizes depths so the coupling constraint
holds by construction, and sharpens the switch slope geometrically until
the switches are numerically binary, then repairs the rounded schedule
with one more continuous solve.

Slack variables of the zone soft constraints are eliminated analytically:
each optimal slack equals the one-sided zone violation, so the objective
uses the violations directly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import lstm as lstm_mod
from .errors import HorizonTooLong

N_EXACT_MAX = 14


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZoneSpec:
    """Target head interval [mm] and the quadratic violation prices."""

    nu_lo: float
    nu_hi: float
    q_lo: float = 9000.0
    q_hi: float = 9000.0

    def __post_init__(self):
        if not self.nu_lo < self.nu_hi:
            raise ValueError("zone bounds must satisfy nu_lo < nu_hi")
        if self.q_lo < 0 or self.q_hi < 0:
            raise ValueError("violation prices must be nonnegative")

    def penalty(self, x):
        over = np.maximum(0.0, np.asarray(x) - self.nu_hi)
        under = np.maximum(0.0, self.nu_lo - np.asarray(x))
        return float(self.q_hi * np.sum(over ** 2) + self.q_lo * np.sum(under ** 2))

    def penalty_grad(self, x):
        x = np.asarray(x)
        over = np.maximum(0.0, x - self.nu_hi)
        under = np.maximum(0.0, self.nu_lo - x)
        return 2.0 * self.q_hi * over - 2.0 * self.q_lo * under


@dataclass(frozen=True)
class ScheduleProblem:
    """One day's scheduling problem for a uniform field.

    ``history`` is an (lag+1, 5) array of physical daily rows
    [x, u_irrig, rain, kc, et0]; the last row is today's, and its
    irrigation entry is a placeholder the solver owns. ``forecast`` is
    (N, 3) physical [rain, kc, et0] for days d .. d+N-1.
    """

    model: object
    horizon: int
    history: np.ndarray
    forecast: np.ndarray
    zone: ZoneSpec
    r_c: float = 50.0
    r_u: float = 20.0
    u_lo: float = 1.4
    u_hi: float = 15.6
    day: int = 0
    n_exact_max: int = N_EXACT_MAX

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least one day")
        if not 0 < self.u_lo <= self.u_hi:
            raise ValueError("need 0 < u_lo <= u_hi")
        hist = np.asarray(self.history, dtype=float)
        fc = np.asarray(self.forecast, dtype=float)
        if fc.shape != (self.horizon, 3):
            raise ValueError(f"forecast must be ({self.horizon}, 3), got {fc.shape}")
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "forecast", fc)


@dataclass
class Schedule:
    """Solver output: decisions, depths, predictions and the cost split."""

    c: np.ndarray
    u: np.ndarray
    x_pred: np.ndarray
    cost: float
    cost_zone: float
    cost_fixed: float
    cost_volume: float
    info: dict = field(default_factory=dict)

    @property
    def events(self):
        return tuple(int(k) for k in np.nonzero(self.c)[0])

    def csv_lines(self, start_day=0):
        lines = ["day,c,u_mm,x_pred_mm"]
        for k in range(len(self.c)):
            lines.append(f"{start_day + k},{int(self.c[k])},"
                         f"{repr(float(self.u[k]))},{repr(float(self.x_pred[k]))}")
        return lines


# ---------------------------------------------------------------------------
# dynamics wrappers
# ---------------------------------------------------------------------------

class LstmDynamics:
    """Binds a trained surrogate to one problem's history and forecast.

    predict_tape maps the N irrigation depths [mm/day] to the N predicted
    heads [mm]; vjp pulls head adjoints back onto the depths via reverse
    accumulation through the unrolled recursion.
    """

    def __init__(self, model: lstm_mod.LstmModel, history, forecast):
        self.model = model
        stats = model.stats
        history = np.asarray(history, dtype=float)
        if history.shape != model.window_shape:
            raise ValueError(f"history must be {model.window_shape}")
        self.n = len(forecast)
        self._base_window = stats.normalize_rows(history)
        # exogenous columns [rain, kc, et0] live at channels 2..4
        exog = np.column_stack([
            (np.asarray(forecast, dtype=float)[:, j] - stats.mins[2 + j]) / stats.spans[2 + j]
            for j in range(3)
        ])
        self._exog = exog
        self._u_min = stats.mins[1]
        self._u_span = stats.spans[1]
        self._x_span = stats.spans[0]

    def _norm_u(self, u):
        return (np.asarray(u, dtype=float) - self._u_min) / self._u_span

    def predict_tape(self, u):
        un = self._norm_u(u)
        window = self._base_window.copy()
        window[-1, 1] = un[0]
        window[-1, 2:] = self._exog[0]
        future = np.column_stack([un[1:], self._exog[1:]])
        roll = lstm_mod.rollout(self.model, window, future)
        return roll.heads_mm, roll

    def predict(self, u):
        return self.predict_tape(u)[0]

    def vjp(self, tape, w_mm):
        seeds = np.asarray(w_mm, dtype=float)[None, :] * self._x_span
        du_norm = lstm_mod.rollout_vjp(self.model, tape, seeds)
        return du_norm[0] / self._u_span

    def jacobian(self, u):
        _, tape = self.predict_tape(u)
        du = lstm_mod.rollout_vjp(self.model, tape, np.eye(self.n))
        return du * (self._x_span / self._u_span)


def make_dynamics(problem: ScheduleProblem):
    model = problem.model
    if hasattr(model, "bind"):
        return model.bind(problem)
    return LstmDynamics(model, problem.history, problem.forecast)


# ---------------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------------

def evaluate_cost(problem: ScheduleProblem, c, u, dynamics=None):
    """Total cost of a decision pair, with the predicted heads.

    Requires the pair to be feasible: zero depth on skip days, boxed depth
    on event days. Returns (cost, breakdown dict, predicted heads).
    """
    c = np.asarray(c, dtype=int)
    u = np.asarray(u, dtype=float)
    n = problem.horizon
    if c.shape != (n,) or u.shape != (n,):
        raise ValueError("c and u must have horizon length")
    off = c == 0
    if np.any(u[off] != 0.0):
        raise ValueError("skip days must carry zero depth")
    tol = 1e-9
    if np.any(u[~off] < problem.u_lo - tol) or np.any(u[~off] > problem.u_hi + tol):
        raise ValueError("event depths must lie in [u_lo, u_hi]")
    dyn = dynamics or make_dynamics(problem)
    x = dyn.predict(u)
    zone = problem.zone.penalty(x)
    fixed = problem.r_c * float(np.sum(c))
    volume = problem.r_u * float(np.sum(u))
    total = zone + fixed + volume
    return total, {"zone": zone, "fixed": fixed, "volume": volume, "total": total}, x


# ---------------------------------------------------------------------------
# projected gradient machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InnerSettings:
    """Projected-gradient solver knobs shared by both formulations."""

    max_iter: int = 200
    gtol: float = 1e-4
    armijo: float = 1e-4
    max_backtracks: int = 30
    multistart: int = 3


def _projected_descent(f, grad, z0, lower, upper, settings: InnerSettings):
    """Box-constrained projected gradient descent with spectral step sizes.

    The step follows the Barzilai-Borwein quotient of the last move (safe-
    guarded by Armijo backtracking), which copes with the badly scaled mix
    of steep violation penalties and flat volumetric cost. f returns
    (value, aux); grad(aux) the gradient at that point.

    Returns (z, value, aux, accepted_any, converged).
    """
    z = np.clip(z0, lower, upper)
    fz, aux = f(z)
    g = grad(aux)
    gmax = np.max(np.abs(g), initial=0.0)
    step = float(np.max(upper - lower)) / gmax if gmax > 0 else 1.0
    prev = None  # (z, g) of the previous accepted iterate
    accepted_any = False
    converged = False
    for _ in range(settings.max_iter):
        pg = z - np.clip(z - g, lower, upper)
        if np.max(np.abs(pg), initial=0.0) < settings.gtol:
            converged = True
            break
        if prev is not None:
            s = z - prev[0]
            y = g - prev[1]
            sy = float(s @ y)
            if sy > 1e-16:
                step = min(max(float(s @ s) / sy, 1e-12), 1e12)
        moved = False
        trial_step = step
        for _ in range(settings.max_backtracks):
            trial = np.clip(z - trial_step * g, lower, upper)
            direction = z - trial
            if not np.any(direction):
                break
            f_trial, aux_trial = f(trial)
            if f_trial <= fz - settings.armijo * float(g @ direction):
                prev = (z, g)
                z, fz, aux = trial, f_trial, aux_trial
                g = grad(aux)
                moved = True
                accepted_any = True
                break
            trial_step *= 0.5
        if not moved:
            break
    return z, fz, aux, accepted_any, converged


def solve_continuous(problem: ScheduleProblem, c, dynamics=None,
                     settings: InnerSettings = InnerSettings()):
    """Best depths for a fixed binary pattern.

    Event-day depths are optimized inside their box by projected gradient
    descent from up to three starts (floor, midpoint, ceiling); skip days
    stay at zero. Returns a Schedule whose info carries a ``stalled`` flag
    when no start managed a single improving step.
    """
    c = np.asarray(c, dtype=int)
    n = problem.horizon
    dyn = dynamics or make_dynamics(problem)
    active = np.nonzero(c)[0]
    if active.size == 0:
        u = np.zeros(n)
        cost, bd, x = evaluate_cost(problem, c, u, dyn)
        return Schedule(c=c.copy(), u=u, x_pred=x, cost=cost, cost_zone=bd["zone"],
                        cost_fixed=bd["fixed"], cost_volume=bd["volume"],
                        info={"stalled": False, "starts": 0})

    lower = np.full(active.size, problem.u_lo)
    upper = np.full(active.size, problem.u_hi)

    def f(ua):
        u = np.zeros(n)
        u[active] = ua
        heads, tape = dyn.predict_tape(u)
        zone = problem.zone.penalty(heads)
        value = zone + problem.r_c * active.size + problem.r_u * float(np.sum(ua))
        return value, (heads, tape)

    def grad(aux):
        heads, tape = aux
        w = problem.zone.penalty_grad(heads)
        du = dyn.vjp(tape, w)
        return du[active] + problem.r_u

    mid = 0.5 * (problem.u_lo + problem.u_hi)
    starts = [np.full(active.size, v) for v in (problem.u_lo, mid, problem.u_hi)]
    starts = starts[: max(1, settings.multistart)]

    best = None
    stalled = True
    for z0 in starts:
        z, fz, aux, accepted, converged = _projected_descent(f, grad, z0, lower, upper, settings)
        stalled = stalled and not (accepted or converged)
        if best is None or fz < best[1]:
            best = (z, fz, aux)
    ua, cost, (heads, _) = best
    u = np.zeros(n)
    u[active] = ua
    zone = problem.zone.penalty(heads)
    fixed = problem.r_c * float(active.size)
    volume = problem.r_u * float(np.sum(u))
    return Schedule(c=c.copy(), u=u, x_pred=heads, cost=zone + fixed + volume,
                    cost_zone=zone, cost_fixed=fixed, cost_volume=volume,
                    info={"stalled": stalled, "starts": len(starts)})


# ---------------------------------------------------------------------------
# exact solver
# ---------------------------------------------------------------------------

def _prefer(a: Schedule, b: Schedule, tol=1e-12):
    """True when schedule a beats b: lower cost, then fewer events, then
    lexicographically earlier event days."""
    if a.cost < b.cost - tol:
        return True
    if a.cost > b.cost + tol:
        return False
    ea, eb = a.events, b.events
    if len(ea) != len(eb):
        return len(ea) < len(eb)
    return ea < eb


def _heuristic_patterns(n):
    """Cheap primal candidates: k evenly spread events for small k."""
    patterns = [np.zeros(n, dtype=int)]
    for k in range(1, min(6, n) + 1):
        c = np.zeros(n, dtype=int)
        spots = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
        c[spots] = 1
        patterns.append(c)
    seen = set()
    out = []
    for c in patterns:
        key = tuple(c)
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def solve_mixed_integer(problem: ScheduleProblem, dynamics=None,
                        settings: InnerSettings = InnerSettings()):
    """Exact solve over the binary decisions by depth-first branch and bound.

    Nodes are pruned with the admissible floor (r_c + r_u*u_lo) per
    committed event (zone cost is bounded below by zero). A handful of
    evenly-spread event patterns seed the incumbent so pruning starts
    early. Ties break toward fewer, then earlier, events.
    """
    n = problem.horizon
    if n > problem.n_exact_max:
        raise HorizonTooLong(
            f"horizon {n} exceeds the exact-solve cap {problem.n_exact_max}")
    dyn = dynamics or make_dynamics(problem)

    best = None
    leaves = 0
    for c in _heuristic_patterns(n):
        cand = solve_continuous(problem, c, dyn, settings)
        leaves += 1
        if best is None or _prefer(cand, best):
            best = cand

    event_floor = problem.r_c + problem.r_u * problem.u_lo
    nodes = 0
    stack = [(0, 0, [])]  # (depth, committed events, decided prefix)
    while stack:
        depth, events, prefix = stack.pop()
        nodes += 1
        if best is not None and events * event_floor > best.cost + 1e-9:
            continue
        if depth == n:
            c = np.array(prefix, dtype=int)
            cand = solve_continuous(problem, c, dyn, settings)
            leaves += 1
            if _prefer(cand, best):
                best = cand
            continue
        # LIFO: push the irrigate branch first so the skip branch explores first
        stack.append((depth + 1, events + 1, prefix + [1]))
        stack.append((depth + 1, events, prefix + [0]))
    best.info.update({"nodes": nodes, "leaves": leaves, "solver": "exact"})
    return best


# ---------------------------------------------------------------------------
# sigmoid relaxation and slope homotopy
# ---------------------------------------------------------------------------

def sigmoid(r, beta):
    """Logistic switch 1 / (1 + exp(-beta r)); 0.5 at r = 0."""
    return expit(beta * np.asarray(r, dtype=float))


@dataclass(frozen=True)
class SigmoidConfig:
    """Homotopy schedule and inner-solver settings for the relaxation."""

    beta0: float = 5.0
    tau: float = 2.0
    zeta: float = 1e-2
    r_min: float = -1.0
    r_max: float = 1.0
    max_iterations: int = 12
    inner: InnerSettings = InnerSettings()
    # one-flip descent on the rounded pattern; the relaxation can hide
    # meaningful water in near-zero switches, and rounding then drops it
    polish_flips: bool = True

    def __post_init__(self):
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.tau <= 1:
            raise ValueError("tau must exceed one")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if not self.r_min < 0 < self.r_max:
            raise ValueError("switch argument box must straddle zero")


@dataclass
class SigmoidSolution:
    r: np.ndarray
    s: np.ndarray
    u: np.ndarray
    omega: np.ndarray
    relaxed_cost: float
    x_pred: np.ndarray
    stalled: bool


def solve_sigmoid(problem: ScheduleProblem, beta, warm=None, dynamics=None,
                  config: SigmoidConfig = SigmoidConfig()):
    """Smooth relaxation at a fixed slope beta.

    Depths are reparameterized as u = omega(r) * (u_lo + s*(u_hi - u_lo))
    with s in [0, 1], which enforces omega*u_lo <= u <= omega*u_hi at every
    iterate, and the fixed charge is paid fractionally as r_c * omega(r).
    """
    n = problem.horizon
    dyn = dynamics or make_dynamics(problem)
    du_span = problem.u_hi - problem.u_lo
    lower = np.concatenate([np.full(n, config.r_min), np.zeros(n)])
    upper = np.concatenate([np.full(n, config.r_max), np.ones(n)])

    def unpack(z):
        r, s = z[:n], z[n:]
        om = sigmoid(r, beta)
        u = om * (problem.u_lo + s * du_span)
        return r, s, om, u

    def f(z):
        _, _, om, u = unpack(z)
        heads, tape = dyn.predict_tape(u)
        value = (problem.zone.penalty(heads)
                 + problem.r_c * float(np.sum(om))
                 + problem.r_u * float(np.sum(u)))
        return value, (z, heads, tape)

    def grad(aux):
        z, heads, tape = aux
        _, s, om, u = unpack(z)
        dj_du = dyn.vjp(tape, problem.zone.penalty_grad(heads)) + problem.r_u
        dom = beta * om * (1.0 - om)
        dr = problem.r_c * dom + dj_du * dom * (problem.u_lo + s * du_span)
        ds = dj_du * om * du_span
        return np.concatenate([dr, ds])

    if warm is not None:
        starts = [np.concatenate([warm[0], warm[1]])]
    else:
        starts = [np.concatenate([np.zeros(n), np.full(n, frac)])
                  for frac in (0.5, 0.25, 1.0)][: max(1, config.inner.multistart)]

    best = None
    stalled = True
    for z0 in starts:
        z, fz, aux, accepted, converged = _projected_descent(f, grad, z0, lower, upper, config.inner)
        stalled = stalled and not (accepted or converged)
        if best is None or fz < best[1]:
            best = (z, fz, aux)
    z, fz, (_, heads, _) = best
    r, s, om, u = unpack(z)
    return SigmoidSolution(r=r, s=s, u=u, omega=om, relaxed_cost=fz,
                           x_pred=heads, stalled=stalled)


def beta_homotopy(problem: ScheduleProblem, config: SigmoidConfig = SigmoidConfig(),
                  dynamics=None):
    """Sharpen the switch slope until the relaxation is numerically binary.

    Each stage solves the relaxation warm-started from the previous one,
    then checks the Euclidean distance between the switch values and their
    nearest binaries. On success the rounded pattern is repaired with a
    continuous solve so the result satisfies the binary-coupling rule
    exactly; if the distance never reaches the tolerance the best rounded
    schedule is returned with ``converged`` False in its info.
    """
    n = problem.horizon
    dyn = dynamics or make_dynamics(problem)
    beta = config.beta0
    warm = None
    trace = []
    converged = False
    last = None
    for it in range(config.max_iterations):
        sol = solve_sigmoid(problem, beta, warm=warm, dynamics=dyn, config=config)
        c = (sol.omega > 0.5).astype(int)
        dist = float(np.linalg.norm(sol.omega - c))
        trace.append({"beta": beta, "relaxed_cost": sol.relaxed_cost,
                      "distance": dist, "stalled": sol.stalled})
        last = (sol, c)
        if dist <= config.zeta:
            converged = True
            break
        warm = (sol.r, sol.s)
        beta *= config.tau

    sol, c = last
    repaired = solve_continuous(problem, c, dyn, config.inner)
    flips = 0
    if config.polish_flips:
        improved = True
        while improved and flips < 6:
            improved = False
            candidates = []
            for k in range(n):  # toggle one day
                c2 = repaired.c.copy()
                c2[k] = 1 - c2[k]
                candidates.append(c2)
            for a in np.nonzero(repaired.c)[0]:  # relocate one event
                for b in np.nonzero(repaired.c == 0)[0]:
                    c2 = repaired.c.copy()
                    c2[a], c2[b] = 0, 1
                    candidates.append(c2)
            for c2 in candidates:
                cand = solve_continuous(problem, c2, dyn, config.inner)
                if _prefer(cand, repaired):
                    repaired = cand
                    flips += 1
                    improved = True
                    break
    repaired.info.update({
        "solver": "homotopy",
        "converged": converged,
        "iterations": len(trace),
        "final_beta": trace[-1]["beta"],
        "final_distance": trace[-1]["distance"],
        "polish_flips": flips,
        "trace": trace,
    })
    return repaired


def enumerate_exact(problem: ScheduleProblem, dynamics=None,
                    settings: InnerSettings = InnerSettings()):
    """Reference oracle: try every binary pattern with the inner solver."""
    n = problem.horizon
    dyn = dynamics or make_dynamics(problem)
    best = None
    for bits in itertools.product((0, 1), repeat=n):
        cand = solve_continuous(problem, np.array(bits, dtype=int), dyn, settings)
        if best is None or _prefer(cand, best):
            best = cand
    best.info["solver"] = "enumeration"
    return best
