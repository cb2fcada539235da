"""Cost evaluation, inner solver, exact search and the sigmoid homotopy.

Most tests run against a linear stand-in dynamics model (head = offset
plus a lower-triangular response matrix times the depths) so optima have
closed forms and full enumeration stays cheap.
"""

import numpy as np
import pytest

from soilmpc import scheduler as sch
from soilmpc.errors import HorizonTooLong


class LinearDynamics:
    """x = x0 + L @ u with lower-triangular L, mimicking causal dynamics."""

    def __init__(self, x0, L):
        self.x0 = np.asarray(x0, dtype=float)
        self.L = np.asarray(L, dtype=float)
        self.n = len(self.x0)

    def bind(self, problem):
        assert problem.horizon == self.n
        return self

    def predict_tape(self, u):
        return self.x0 + self.L @ np.asarray(u, dtype=float), None

    def predict(self, u):
        return self.predict_tape(u)[0]

    def vjp(self, tape, w):
        return self.L.T @ np.asarray(w, dtype=float)

    def jacobian(self, u):
        return self.L


def linear_problem(x0, L, zone, **kw):
    n = len(x0)
    kw.setdefault("r_c", 50.0)
    kw.setdefault("r_u", 20.0)
    kw.setdefault("u_lo", 1.4)
    kw.setdefault("u_hi", 15.6)
    return sch.ScheduleProblem(
        model=LinearDynamics(x0, L),
        horizon=n,
        history=np.zeros((5, 5)),
        forecast=np.zeros((n, 3)),
        zone=zone,
        **kw,
    )


def drydown_problem(n=4, seed=0, **kw):
    """A head trajectory drifting below the zone, liftable by irrigation."""
    rng = np.random.default_rng(seed)
    zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0, q_lo=9000.0, q_hi=9000.0)
    drift = rng.uniform(12.0, 22.0, size=n)
    x0 = -760.0 - np.cumsum(drift)
    L = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1):
            L[j, k] = rng.uniform(6.0, 9.0) * (0.8 ** (j - k))
    return linear_problem(x0, L, zone, **kw)


class TestZoneSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            sch.ZoneSpec(nu_lo=-100.0, nu_hi=-200.0)
        with pytest.raises(ValueError):
            sch.ZoneSpec(nu_lo=-200.0, nu_hi=-100.0, q_lo=-1.0)

    def test_penalty_matches_eliminated_slacks(self):
        zone = sch.ZoneSpec(nu_lo=-800.0, nu_hi=-600.0, q_lo=9000.0, q_hi=2000.0)
        x = np.array([-700.0, -590.0, -810.0])
        # optimal slacks are the one-sided violations: 10 above, 10 below
        assert zone.penalty(x) == pytest.approx(2000.0 * 100.0 + 9000.0 * 100.0)


class TestEvaluateCost:
    def test_quiet_in_zone_schedule_costs_nothing(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-750.0, -760.0, -770.0], np.zeros((3, 3)), zone)
        cost, bd, x = sch.evaluate_cost(prob, [0, 0, 0], [0.0, 0.0, 0.0])
        assert cost == 0.0
        assert bd == {"zone": 0.0, "fixed": 0.0, "volume": 0.0, "total": 0.0}

    def test_single_event_pays_fixed_plus_volume(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-750.0, -760.0, -770.0], np.zeros((3, 3)), zone)
        cost, bd, _ = sch.evaluate_cost(prob, [0, 1, 0], [0.0, 5.0, 0.0])
        assert cost == pytest.approx(50.0 + 5.0 * 20.0)
        assert bd["fixed"] == 50.0 and bd["volume"] == 100.0

    def test_ten_mm_overshoot_costs_qhi_times_hundred(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0, q_hi=9000.0)
        prob = linear_problem([-680.0, -750.0], np.zeros((2, 2)), zone)
        cost, bd, _ = sch.evaluate_cost(prob, [0, 0], [0.0, 0.0])
        assert bd["zone"] == pytest.approx(9000.0 * 100.0)
        assert cost == bd["zone"]

    def test_rejects_infeasible_pairs(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-750.0, -760.0], np.zeros((2, 2)), zone)
        with pytest.raises(ValueError):
            sch.evaluate_cost(prob, [0, 0], [1.0, 0.0])
        with pytest.raises(ValueError):
            sch.evaluate_cost(prob, [1, 0], [0.5, 0.0])  # below u_lo


class TestSolveContinuous:
    def test_all_skip_pattern_returns_unforced_zone_cost(self):
        prob = drydown_problem(n=3, seed=1)
        sched = sch.solve_continuous(prob, [0, 0, 0])
        assert np.array_equal(sched.u, np.zeros(3))
        unforced = prob.zone.penalty(prob.model.predict(np.zeros(3)))
        assert sched.cost == pytest.approx(unforced)

    def test_recovers_analytic_box_constrained_minimum(self):
        # diagonal response, heads pinned below the zone floor: each active
        # day has the closed-form minimizer u* = (nu_lo - x0)/d - r_u/(2 q d^2)
        zone = sch.ZoneSpec(nu_lo=-800.0, nu_hi=-600.0, q_lo=100.0, q_hi=100.0)
        x0 = np.array([-900.0, -880.0, -850.0])
        d = np.array([20.0, 12.0, 4.0])
        prob = linear_problem(x0, np.diag(d), zone,
                              r_c=5.0, r_u=2.0, u_lo=0.5, u_hi=10.0)
        expected = (zone.nu_lo - x0) / d - prob.r_u / (2 * zone.q_lo * d ** 2)
        expected = np.clip(expected, prob.u_lo, prob.u_hi)
        settings = sch.InnerSettings(max_iter=3000, gtol=1e-9)
        sched = sch.solve_continuous(prob, [1, 1, 1], settings=settings)
        assert np.max(np.abs(sched.u - expected)) < 1e-6
        assert expected[2] == prob.u_hi  # exercises the projection onto the box

    def test_cost_breakdown_sums_to_total(self):
        prob = drydown_problem(n=4, seed=3)
        sched = sch.solve_continuous(prob, [1, 0, 1, 0])
        assert sched.cost == pytest.approx(
            sched.cost_zone + sched.cost_fixed + sched.cost_volume)
        cost2, bd2, _ = sch.evaluate_cost(prob, sched.c, sched.u)
        assert cost2 == pytest.approx(sched.cost)

    def test_feasible_output(self):
        prob = drydown_problem(n=5, seed=4)
        sched = sch.solve_continuous(prob, [1, 0, 0, 1, 1])
        assert np.all(sched.u[sched.c == 0] == 0.0)
        on = sched.c == 1
        assert np.all(sched.u[on] >= prob.u_lo) and np.all(sched.u[on] <= prob.u_hi)


class TestSolveMixedInteger:
    def test_single_day_dominant_violation_forces_irrigation(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0, q_lo=9000.0, q_hi=9000.0)
        prob = linear_problem([-900.0], [[8.0]], zone)
        sched = sch.solve_mixed_integer(prob)
        assert tuple(sched.c) == (1,)

    def test_single_day_in_zone_skips(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-750.0], [[8.0]], zone)
        sched = sch.solve_mixed_integer(prob)
        assert tuple(sched.c) == (0,)
        assert sched.cost == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_full_enumeration(self, seed):
        prob = drydown_problem(n=4, seed=seed)
        bb = sch.solve_mixed_integer(prob)
        ref = sch.enumerate_exact(prob)
        assert bb.cost == pytest.approx(ref.cost, abs=1e-9)
        assert tuple(bb.c) == tuple(ref.c)

    def test_ties_break_to_earlier_event(self):
        # days 0 and 1 lift day 2's deficit identically; day 0 must win
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        L = np.zeros((3, 3))
        L[2, 0] = L[2, 1] = 6.0
        prob = linear_problem([-700.0, -700.0, -900.0], L, zone)
        sched = sch.solve_mixed_integer(prob)
        assert sched.events == (0,)
        ref = sch.enumerate_exact(prob)
        assert ref.events == (0,)

    def test_horizon_cap(self):
        n = 15
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem(np.full(n, -750.0), np.zeros((n, n)), zone)
        with pytest.raises(HorizonTooLong):
            sch.solve_mixed_integer(prob)

    def test_preference_ordering(self):
        a = sch.Schedule(c=np.array([1, 0]), u=np.array([2.0, 0.0]),
                         x_pred=np.zeros(2), cost=10.0, cost_zone=0, cost_fixed=0, cost_volume=0)
        b = sch.Schedule(c=np.array([0, 1]), u=np.array([0.0, 2.0]),
                         x_pred=np.zeros(2), cost=10.0, cost_zone=0, cost_fixed=0, cost_volume=0)
        both = sch.Schedule(c=np.array([1, 1]), u=np.array([2.0, 2.0]),
                            x_pred=np.zeros(2), cost=10.0, cost_zone=0, cost_fixed=0, cost_volume=0)
        assert sch._prefer(a, b)          # earlier event
        assert not sch._prefer(b, a)
        assert sch._prefer(a, both)       # fewer events
        assert sch._prefer(a, sch.Schedule(c=b.c, u=b.u, x_pred=b.x_pred, cost=10.1,
                                           cost_zone=0, cost_fixed=0, cost_volume=0))


class TestSigmoid:
    def test_value_at_zero(self):
        assert sch.sigmoid(0.0, 5.0) == 0.5
        assert sch.sigmoid(0.0, 500.0) == 0.5

    def test_steep_slope_saturates(self):
        assert sch.sigmoid(1.0, 25.0) == pytest.approx(1.0, abs=1e-10)
        assert sch.sigmoid(-1.0, 25.0) == pytest.approx(0.0, abs=1e-10)

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        for r in rng.uniform(-2, 2, size=25):
            assert sch.sigmoid(-r, 7.0) == pytest.approx(1.0 - sch.sigmoid(r, 7.0), abs=1e-14)

    def test_strictly_increasing(self):
        r = np.linspace(-3, 3, 50)
        w = sch.sigmoid(r, 4.0)
        assert np.all(np.diff(w) > 0)


class TestSolveSigmoid:
    def test_saturated_switch_matches_binary_semantics(self):
        # with beta huge and r pinned at the box ends, omega is exactly 0/1,
        # so the relaxed cost equals the mixed-integer cost of the rounding
        prob = drydown_problem(n=3, seed=5)
        beta = 60.0
        assert sch.sigmoid(prob.u_hi * 0 + 1.0, beta) == 1.0
        sol = sch.solve_sigmoid(prob, beta)
        c = (sol.omega > 0.5).astype(int)
        u = np.where(c == 1, np.clip(sol.u, prob.u_lo, prob.u_hi), 0.0)
        cost, _, _ = sch.evaluate_cost(prob, c, u)
        assert sol.relaxed_cost == pytest.approx(cost, rel=1e-6)

    def test_off_state_limit_zeroes_depth(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-750.0, -755.0], np.eye(2) * 5.0, zone)
        sol = sch.solve_sigmoid(prob, beta=60.0)
        assert np.all(sol.omega < 1e-9)
        assert np.all(np.abs(sol.u) < prob.u_hi * 1e-8)


class TestBetaHomotopy:
    def test_unforced_in_zone_scenario_rounds_to_all_zero(self):
        zone = sch.ZoneSpec(nu_lo=-820.0, nu_hi=-690.0)
        prob = linear_problem([-720.0, -740.0, -760.0, -780.0], np.eye(4) * 5.0, zone)
        sched = sch.beta_homotopy(prob)
        assert sched.info["converged"]
        assert tuple(sched.c) == (0, 0, 0, 0)
        # each switch value is individually within zeta/sqrt(N) of binary
        final_beta = sched.info["final_beta"]
        omega_off = sch.sigmoid(-1.0, final_beta)
        assert omega_off < sch.SigmoidConfig().zeta / 2.0

    def test_beta_grows_geometrically_and_distance_closes(self):
        prob = drydown_problem(n=4, seed=6)
        sched = sch.beta_homotopy(prob)
        trace = sched.info["trace"]
        betas = [t["beta"] for t in trace]
        for a, b in zip(betas, betas[1:]):
            assert b == pytest.approx(2.0 * a)
        if sched.info["converged"]:
            assert trace[-1]["distance"] <= sch.SigmoidConfig().zeta

    @pytest.mark.parametrize("seed", range(8))
    def test_repaired_cost_close_to_exact(self, seed):
        prob = drydown_problem(n=4, seed=seed)
        exact = sch.solve_mixed_integer(prob)
        relaxed = sch.beta_homotopy(prob)
        # exact is a lower bound for any feasible schedule from the homotopy
        assert relaxed.cost >= exact.cost - 1e-9
        assert relaxed.cost <= 1.05 * exact.cost + 1e-9

    def test_output_is_feasible(self):
        prob = drydown_problem(n=5, seed=9)
        sched = sch.beta_homotopy(prob)
        off = sched.c == 0
        assert np.all(sched.u[off] == 0.0)
        on = ~off
        assert np.all(sched.u[on] >= prob.u_lo - 1e-12)
        assert np.all(sched.u[on] <= prob.u_hi + 1e-12)

    def test_deterministic(self):
        prob = drydown_problem(n=4, seed=10)
        a = sch.beta_homotopy(prob)
        b = sch.beta_homotopy(prob)
        assert np.array_equal(a.c, b.c)
        assert np.array_equal(a.u, b.u)
        assert a.cost == b.cost
