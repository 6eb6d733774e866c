import json
import math

import numpy as np
import pytest
from scipy.special import xlogy

from regldp.errors import InfeasibleEventError, UsageError
from regldp.ldp import (REPORT_COLUMNS, Constraint, EventSpec, convergence_report,
                        exact_event_probability, lattice_infimum, mc_event_probability,
                        minimize_rate, wilson_interval)
from regldp.measures import SpinLaw, is_admissible, rate_function

H_34 = 0.130812035941136959
UNIFORM2 = SpinLaw.uniform(2)
RHO1_75 = EventSpec.rho_at_least(2, 0, 0.75)


def grid_min_nu11(bound, d, mu, step=1e-3):
    """Brute-force min of I over the q=2 admissible family (rho1, nu11) with nu11 >= bound."""
    r1 = np.arange(0, 1 + step / 2, step)[:, None]
    n11 = np.arange(0, 1 + step / 2, step)[None, :]
    n12 = r1 - n11
    n22 = 1 - 2 * r1 + n11
    ok = (n11 >= bound - 1e-12) & (n12 >= -1e-12) & (n22 >= -1e-12)
    r2 = 1 - r1
    with np.errstate(divide="ignore", invalid="ignore"):
        def xlx(p, w):
            return np.where(p > 0, p * np.log(np.where(p > 0, p, 1) / w), 0.0)
        val = xlx(r1, mu[0]) + xlx(r2, mu[1]) + 0.5 * d * (
            xlx(n11, r1 * r1) + 2 * xlx(np.clip(n12, 0, None), r1 * r2) + xlx(np.clip(n22, 0, None), r2 * r2))
    val = np.where(ok & np.isfinite(val), val, np.inf)
    k = np.unravel_index(np.argmin(val), val.shape)
    return val[k], float(r1[k[0], 0]), float(n11[0, k[1]])


class TestEventSpec:
    def test_json_round_trip(self):
        text = json.dumps([{"target": "rho", "coeffs": [1, 0], "bound": 0.75, "sense": ">="},
                           {"target": "nu", "coeffs": [[0, 1], [1, 0]], "bound": 0.4, "sense": "<="}])
        ev = EventSpec.from_json(text)
        assert ev.q == 2 and not ev.rho_only
        assert EventSpec.from_json(ev.to_json()).to_list() == ev.to_list()

    def test_box_entry_form(self):
        ev = EventSpec.from_list([{"target": "nu", "entry": [0, 1], "bound": 0.1}], q=3)
        assert ev.constraints[0].coeffs[0, 1] == 1.0 and ev.constraints[0].coeffs.sum() == 1.0

    def test_contains_batched(self):
        rho = np.array([[0.8, 0.2], [0.7, 0.3], [0.75, 0.25]])
        nu = np.einsum("bi,bj->bij", rho, rho)
        assert RHO1_75.contains(rho, nu).tolist() == [True, False, True]

    @pytest.mark.parametrize("bad", [
        {"target": "eta", "coeffs": [1], "bound": 0},
        {"target": "rho", "coeffs": [1, 0], "bound": 0, "sense": ">"},
        {"target": "rho", "coeffs": [1, float("nan")], "bound": 0},
        {"target": "nu", "coeffs": [1, 0], "bound": 0},
    ])
    def test_bad_constraints(self, bad):
        with pytest.raises(UsageError):
            EventSpec.from_list([bad])

    def test_q_mismatch(self):
        with pytest.raises(UsageError):
            EventSpec(3, (Constraint("rho", [1, 0], 0.5),))


class TestMonteCarlo:
    def test_always_true(self):
        est = mc_event_probability(EventSpec.always(2), 10, 3, UNIFORM2, 500, seed=1)
        assert est.p_hat == 1.0 and est.log_rate == 0.0 and est.hits == 500

    def test_impossible(self):
        est = mc_event_probability(EventSpec.rho_at_least(2, 0, 2.0), 10, 3, UNIFORM2, 500, seed=1)
        assert est.p_hat == 0.0 and est.log_rate == math.inf
        assert est.ci95[0] == 0.0 and 0 < est.ci95[1] < 0.01

    def test_independent_of_workers_and_deterministic(self):
        ev = EventSpec.nu_at_least(2, 0, 1, 0.3)
        a = mc_event_probability(ev, 12, 3, UNIFORM2, 20_000, seed=5, block_size=1000)
        b = mc_event_probability(ev, 12, 3, UNIFORM2, 20_000, seed=5, block_size=1000, workers=3)
        c = mc_event_probability(ev, 12, 3, UNIFORM2, 20_000, seed=5, block_size=1000)
        assert a == b == c
        assert mc_event_probability(ev, 12, 3, UNIFORM2, 20_000, seed=6, block_size=1000) != a

    def test_wilson(self):
        lo, hi = wilson_interval(50, 100)
        # (p + z^2/2N +- z sqrt(p(1-p)/N + z^2/4N^2)) / (1 + z^2/N), z = 1.959964
        z = 1.959963984540054
        centre = (0.5 + z * z / 200) / (1 + z * z / 100)
        half = z * math.sqrt(0.25 / 100 + z * z / 40000) / (1 + z * z / 100)
        assert lo == pytest.approx(centre - half, abs=1e-12)
        assert hi == pytest.approx(centre + half, abs=1e-12)

    @pytest.mark.parametrize("event", [
        EventSpec.nu_at_least(2, 0, 1, 0.3),
        EventSpec.rho_at_least(2, 0, 0.66),
    ])
    def test_ci_coverage(self, event):
        mu = SpinLaw(["1/2", "1/2"])
        exact = float(exact_event_probability(event, 6, 2, mu))
        assert 0.05 < exact < 0.95
        # 93% of runs; 1000 runs keep the chance of a false alarm near 0.2%.
        covered = 0
        for run in range(1000):
            est = mc_event_probability(event, 6, 2, mu, 2000, seed=1000 + run)
            covered += est.ci95[0] <= exact <= est.ci95[1]
        assert covered >= 930

    def test_exact_event_probability_sums(self):
        ev = EventSpec.always(3)
        assert exact_event_probability(ev, 4, 2, SpinLaw.uniform(3)) == 1


class TestMinimize:
    def test_always_true(self):
        mu = SpinLaw([0.2, 0.3, 0.5])
        res = minimize_rate(EventSpec.always(3), mu, 4)
        np.testing.assert_allclose(res.rho_star.mass, mu.weights, atol=1e-9)
        np.testing.assert_allclose(res.nu_star.mass, np.outer(mu.weights, mu.weights), atol=1e-9)
        assert res.value <= 1e-12

    @pytest.mark.parametrize("d", [1, 2, 3, 7])
    def test_rho_bound(self, d):
        res = minimize_rate(RHO1_75, UNIFORM2, d)
        np.testing.assert_allclose(res.rho_star.mass, [0.75, 0.25], atol=1e-8)
        np.testing.assert_allclose(res.nu_star.mass, np.outer([0.75, 0.25], [0.75, 0.25]), atol=1e-8)
        assert res.value == pytest.approx(H_34, abs=1e-9)
        assert res.kkt_residual <= 1e-7

    def test_rho_bound_grid_oracle(self):
        r = np.linspace(0.75, 1.0, 250_001)
        grid = np.min(xlogy(r, 2 * r) + xlogy(1 - r, 2 * (1 - r)))
        assert minimize_rate(RHO1_75, UNIFORM2, 3).value == pytest.approx(grid, abs=1e-9)

    @pytest.mark.parametrize("bound,d,mu", [(0.5, 3, (0.5, 0.5)), (0.5, 2, (0.5, 0.5)),
                                            (0.3, 4, (0.3, 0.7)), (0.8, 3, (0.5, 0.5))])
    def test_nu_bound_grid_oracle(self, bound, d, mu):
        res = minimize_rate(EventSpec.nu_at_least(2, 0, 0, bound), SpinLaw(mu), d)
        grid_val, r1, n11 = grid_min_nu11(bound, d, np.array(mu))
        assert abs(res.value - grid_val) <= 1e-3
        assert res.value <= grid_val + 1e-9
        assert res.kkt_residual <= 1e-7

    def test_nu_bound_known_minimiser(self):
        res = minimize_rate(EventSpec.nu_at_least(2, 0, 0, 0.5), UNIFORM2, 3)
        _, r1, n11 = grid_min_nu11(0.5, 3, np.array([0.5, 0.5]))
        assert res.rho_star.mass[0] == pytest.approx(r1, abs=2e-3)
        assert res.nu_star.mass[0, 0] == pytest.approx(0.5, abs=1e-8)

    @pytest.mark.parametrize("factor", [1e-3, 0.5, 3.0, 250.0])
    def test_scaling_invariance(self, factor):
        ev = EventSpec(3, (Constraint("rho", [1, 1, 0], 0.8), Constraint("rho", [0, 2, -1], 0.1, "<=")))
        mu = SpinLaw([0.2, 0.3, 0.5])
        base = minimize_rate(ev, mu, 3)
        scaled = minimize_rate(ev.scaled(factor), mu, 3)
        np.testing.assert_allclose(scaled.rho_star.mass, base.rho_star.mass, atol=1e-8)

    def test_rho_only_gives_product(self):
        ev = EventSpec(3, (Constraint("rho", [1, -1, 0], 0.2),))
        res = minimize_rate(ev, SpinLaw([0.2, 0.3, 0.5]), 5)
        r = res.rho_star.mass
        np.testing.assert_allclose(res.nu_star.mass, np.outer(r, r), atol=1e-8)

    def test_infeasible(self):
        ev = EventSpec(2, (Constraint("rho", [1, 0], 0.8), Constraint("rho", [1, 0], 0.7, "<=")))
        with pytest.raises(InfeasibleEventError):
            minimize_rate(ev, UNIFORM2, 3)

    def test_infeasible_with_finite_rate(self):
        # Only spin 2 could satisfy it, but mu gives spin 2 no weight.
        with pytest.raises(InfeasibleEventError):
            minimize_rate(EventSpec.rho_at_least(2, 1, 0.5), SpinLaw([1, 0]), 3)

    def test_zero_weight_state(self):
        res = minimize_rate(EventSpec.nu_at_least(3, 0, 1, 0.2), SpinLaw([0.5, 0.5, 0.0]), 3)
        assert res.rho_star.mass[2] == 0.0
        assert np.isfinite(res.value)

    @pytest.mark.parametrize("seed", range(6))
    def test_contract_and_random_search(self, seed):
        rng = np.random.default_rng(seed)
        q = 3
        w = rng.dirichlet(2 * np.ones(q))
        mu = SpinLaw([float(x) for x in w[:-1]] + [1.0 - float(w[:-1].sum())])
        d = int(rng.integers(2, 5))
        a = rng.normal(size=(q, q))
        a = a + a.T
        b = rng.normal(size=q)
        # Anchor the bounds at a random admissible point so the event is never empty.
        x = rng.exponential(size=(q, q))
        nu0 = (x + x.T) / (x + x.T).sum()
        ev = EventSpec(q, (Constraint("nu", a, float((a * nu0).sum()) - 0.05),
                           Constraint("rho", b, float(b @ nu0.sum(axis=1)) - 0.05)))
        # Random admissible points inside the event as an independent upper bound.
        best = math.inf
        for _ in range(20_000):
            x = rng.exponential(size=(q, q)) ** 2
            nu = (x + x.T) / (x + x.T).sum()
            rho = nu.sum(axis=1)
            if ev.contains(rho, nu):
                best = min(best, rate_function(rho, nu, mu, d))
        assert best < math.inf
        res = minimize_rate(ev, mu, d)
        assert res.value <= best + 1e-9
        rho, nu = res.rho_star.mass, res.nu_star.mass
        assert is_admissible(rho, nu, tol=1e-8)
        assert bool(ev.contains(rho, nu, tol=1e-8))
        assert res.value == pytest.approx(rate_function(rho, nu, mu, d), abs=1e-10)
        assert res.kkt_residual <= 1e-7

    @pytest.mark.parametrize("event", [RHO1_75, EventSpec.nu_at_least(2, 0, 1, 0.35),
                                       EventSpec.nu_at_least(2, 1, 1, 0.3)])
    def test_lower_bounds_lattice_infima(self, event):
        cont = minimize_rate(event, UNIFORM2, 3).value
        for n in (4, 10, 16, 30, 50):
            lat = lattice_infimum(event, n, 3, UNIFORM2)
            assert lat >= cont - 1e-9


class TestConvergenceReport:
    def test_always_true(self):
        rep = convergence_report(EventSpec.always(2), 3, UNIFORM2, [8, 16], 1000, seed=0)
        for row in rep.rows:
            assert row["mc_rate"] == 0 and row["lattice_inf"] == 0 and row["continuum_inf"] <= 1e-15

    def test_unrealizable_mean(self):
        # n=4, d=3 would need an odd diagonal (3) to hit mu x mu.
        assert lattice_infimum(EventSpec.always(2), 4, 3, UNIFORM2) > 0.05

    def test_lattice_column(self):
        rep = convergence_report(RHO1_75, 3, UNIFORM2, [10, 20, 40, 80, 100], 2000, seed=0)
        lat = dict(zip(rep.column("n"), rep.column("lattice_inf")))
        # Nested lattices (n divides n') give a non-increasing infimum.
        assert lat[10] >= lat[20] >= lat[40] >= lat[80]
        assert abs(lat[100] - H_34) <= 0.02
        assert all(v >= H_34 - 1e-9 for v in lat.values())
        assert rep.column("continuum_inf")[0] == pytest.approx(H_34, abs=1e-9)

    def test_lattice_not_monotone_off_divisibility(self):
        # n=50 cannot reach rho1 = 0.75 exactly, n=20 can.
        assert lattice_infimum(RHO1_75, 50, 3, UNIFORM2) > lattice_infimum(RHO1_75, 20, 3, UNIFORM2)

    def test_mc_trend(self):
        rep = convergence_report(RHO1_75, 3, UNIFORM2, [10, 20, 40], 200_000, seed=11)
        gaps, widths = [], []
        for row in rep.rows:
            gaps.append(abs(row["mc_rate"] - row["continuum_inf"]))
            # Width of the CI on the rate scale.
            widths.append((math.log(row["ci_hi"]) - math.log(row["ci_lo"])) / row["n"])
        violations = sum(b > a for a, b in zip(gaps, gaps[1:]))
        assert violations == 0 or (violations == 1 and
                                   all(b <= a + w for a, b, w in zip(gaps, gaps[1:], widths[1:])))

    def test_csv(self):
        rep = convergence_report(RHO1_75, 3, UNIFORM2, [10], 1000, seed=0)
        lines = rep.to_csv().splitlines()
        assert tuple(lines[0].split(",")) == REPORT_COLUMNS
        assert len(lines) == 2

    def test_odd_grid_point(self):
        with pytest.raises(UsageError):
            convergence_report(RHO1_75, 3, UNIFORM2, [5], 10, seed=0)
