import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridshield import grid
from gridshield.grid import (
    GenSpec,
    GridSpec,
    LineSpec,
    LoadSpec,
    connected_components,
    loading_ratios,
    max_loading,
    safety_margin,
    solve_dc_power_flow,
    validate_spec,
)

from conftest import random_connected_spec


class TestValidateSpec:
    def test_well_formed_spec_ok(self, toy5):
        assert validate_spec(toy5) == []

    def test_zero_limit_names_line(self, two_bus):
        bad = GridSpec(
            buses=two_bus.buses,
            lines=(LineSpec(0, 0, 1, 1.0, 0.0),),
            generators=two_bus.generators,
            loads=two_bus.loads,
            slack_bus=0,
        )
        violations = validate_spec(bad)
        assert any("line 0" in v and "thermal_limit" in v for v in violations)

    def test_disconnected_graph_flagged(self):
        spec = GridSpec(
            buses=(0, 1, 2, 3),
            lines=(LineSpec(0, 0, 1, 1.0, 1.0), LineSpec(1, 2, 3, 1.0, 1.0)),
            generators=(GenSpec(0, 0, 0.0, 1.0, 0.1),),
            loads=(LoadSpec(0, 1, 0.5),),
            slack_bus=0,
        )
        # oracle: breadth-first search over all lines
        adj = {0: {1}, 1: {0}, 2: {3}, 3: {2}}
        seen, frontier = {0}, [0]
        while frontier:
            seen.update(adj[frontier.pop()])
            frontier = [b for b in adj if b in seen and any(n not in seen for n in adj[b])]
        assert seen != set(spec.buses)
        assert any("disconnected" in v for v in validate_spec(spec))

    def test_slack_without_generator(self, two_bus):
        bad = GridSpec(
            buses=two_bus.buses,
            lines=two_bus.lines,
            generators=(GenSpec(0, 1, 0.0, 2.0, 0.5),),
            loads=two_bus.loads,
            slack_bus=0,
        )
        assert any("slack" in v for v in validate_spec(bad))


class TestSolvePowerFlow:
    def test_single_line_carries_all_power(self, two_bus):
        sol = solve_dc_power_flow(two_bus, np.array([1.0, -1.0]), np.array([True]))
        assert sol.flows[0] == pytest.approx(1.0, abs=1e-12)
        assert sol.rho[0] == pytest.approx(1.0, abs=1e-12)
        assert sol.feasible

    def test_zero_injections_zero_flows(self, triangle):
        sol = solve_dc_power_flow(triangle, np.zeros(3), np.ones(3, bool))
        assert np.all(sol.flows == 0.0)
        assert np.all(sol.rho == 0.0)

    def test_triangle_splits_two_thirds_one_third(self, triangle):
        # oracle: dense solve of the 2x2 reduced Laplacian
        b_red = np.array([[2.0, -1.0], [-1.0, 2.0]])
        theta = np.linalg.solve(b_red, np.array([0.0, -1.0]))
        sol = solve_dc_power_flow(triangle, np.array([1.0, 0.0, -1.0]), np.ones(3, bool))
        assert sol.angles[1] == pytest.approx(theta[0], abs=1e-12)
        assert sol.angles[2] == pytest.approx(theta[1], abs=1e-12)
        assert sol.flows[1] == pytest.approx(2.0 / 3.0, abs=1e-9)
        assert sol.flows[0] == pytest.approx(1.0 / 3.0, abs=1e-9)
        assert sol.flows[2] == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_islanded_load_infeasible(self, two_bus):
        sol = solve_dc_power_flow(two_bus, np.array([1.0, -1.0]), np.array([False]))
        assert not sol.feasible
        assert sol.rho[0] == 0.0

    def test_slack_angle_zero(self, train14):
        inj = np.zeros(train14.n_buses)
        inj[3] = -1.0
        sol = solve_dc_power_flow(train14, inj, np.ones(train14.n_lines, bool))
        assert sol.angles[0] == 0.0

    def test_residual_and_conservation_random_grids(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            spec = random_connected_spec(rng, int(rng.integers(5, 51)))
            inj = rng.normal(0, 1, spec.n_buses)
            status = np.ones(spec.n_lines, bool)
            sol = solve_dc_power_flow(spec, inj, status)
            c = grid.compiled(spec)
            # residual B@theta - P on non-slack buses
            n = spec.n_buses
            b_full = np.zeros((n, n))
            for ell in range(spec.n_lines):
                u, v, bs = c.from_idx[ell], c.to_idx[ell], c.susceptance[ell]
                b_full[u, u] += bs
                b_full[v, v] += bs
                b_full[u, v] -= bs
                b_full[v, u] -= bs
            residual = b_full @ sol.angles - sol.injections
            non_slack = np.arange(n) != c.slack_idx
            assert np.abs(residual[non_slack]).max() <= 1e-8
            # per-bus conservation: net outflow equals injection
            outflow = np.zeros(n)
            np.add.at(outflow, c.from_idx, sol.flows)
            np.add.at(outflow, c.to_idx, -sol.flows)
            assert np.abs(outflow - sol.injections).max() <= 1e-8

    def test_superposition(self, train14):
        rng = np.random.default_rng(1)
        status = np.ones(train14.n_lines, bool)
        p1 = rng.normal(0, 1, train14.n_buses)
        p2 = rng.normal(0, 1, train14.n_buses)
        a, b = 0.7, -1.3
        f1 = solve_dc_power_flow(train14, p1, status).flows
        f2 = solve_dc_power_flow(train14, p2, status).flows
        f12 = solve_dc_power_flow(train14, a * p1 + b * p2, status).flows
        assert np.abs(f12 - (a * f1 + b * f2)).max() <= 1e-8

    def test_flow_antisymmetry(self, train14):
        """Reversing a line's endpoints negates its flow, same rho."""
        rng = np.random.default_rng(3)
        inj = rng.normal(0, 1, train14.n_buses)
        status = np.ones(train14.n_lines, bool)
        base = solve_dc_power_flow(train14, inj, status)
        ell = 7
        flipped_lines = list(train14.lines)
        l = flipped_lines[ell]
        flipped_lines[ell] = LineSpec(l.id, l.to_bus, l.from_bus, l.susceptance, l.thermal_limit)
        flipped = GridSpec(
            buses=train14.buses,
            lines=tuple(flipped_lines),
            generators=train14.generators,
            loads=train14.loads,
            slack_bus=train14.slack_bus,
        )
        sol = solve_dc_power_flow(flipped, inj, status)
        assert sol.flows[ell] == pytest.approx(-base.flows[ell], abs=1e-12)
        assert sol.rho[ell] == pytest.approx(base.rho[ell], abs=1e-12)

    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_singular_system_raises(self):
        # susceptance 0 makes the reduced Laplacian singular; validate_spec
        # would reject this spec, which is exactly what the error signals
        spec = GridSpec(
            buses=(0, 1),
            lines=(LineSpec(0, 0, 1, 0.0, 1.0),),
            generators=(GenSpec(0, 0, 0.0, 2.0, 0.5),),
            loads=(LoadSpec(0, 1, 1.0),),
            slack_bus=0,
        )
        with pytest.raises(grid.SingularSystemError):
            solve_dc_power_flow(spec, np.array([1.0, -1.0]), np.array([True]))


class TestLoadingMetrics:
    def test_loading_ratio_definition(self, two_bus):
        sol = solve_dc_power_flow(two_bus, np.array([0.5, -0.5]), np.array([True]))
        assert loading_ratios(sol)[0] == pytest.approx(0.5, abs=1e-12)

    def test_disconnected_line_rho_zero(self, triangle):
        status = np.array([True, False, True])
        sol = solve_dc_power_flow(triangle, np.array([1.0, 0.0, -1.0]), status)
        assert sol.rho[1] == 0.0

    def test_negative_flow_magnitude(self):
        # flow -1.21 over limit 1.0 reads as rho 1.21
        spec = GridSpec(
            buses=(0, 1),
            lines=(LineSpec(0, 1, 0, 1.0, 1.0),),
            generators=(GenSpec(0, 0, 0.0, 2.0, 0.5),),
            loads=(LoadSpec(0, 1, 1.21),),
            slack_bus=0,
        )
        sol = solve_dc_power_flow(spec, np.array([1.21, -1.21]), np.array([True]))
        assert sol.flows[0] == pytest.approx(-1.21, abs=1e-12)
        assert sol.rho[0] == pytest.approx(1.21, abs=1e-12)

    def test_max_loading(self):
        assert max_loading(np.array([0.2, 0.9, 0.4])) == 0.9
        assert max_loading(np.zeros(3)) == 0.0
        assert max_loading(np.array([0.3, 1.14, 0.2])) == pytest.approx(1.14)

    def test_max_loading_empty_raises(self):
        with pytest.raises(ValueError):
            max_loading(np.array([]))

    def test_safety_margin_values(self):
        assert safety_margin(np.array([0.85])) == pytest.approx(0.15)
        assert safety_margin(np.array([1.0])) == 0.0
        assert safety_margin(np.array([1.21])) == pytest.approx(-0.21)

    @given(st.lists(st.floats(min_value=0.0, max_value=3.0), min_size=1, max_size=40))
    def test_margin_plus_max_is_one(self, rho):
        arr = np.array(rho)
        # identity holds at the representation level: m is literally 1 - max
        assert safety_margin(arr) == 1.0 - max_loading(arr)


class TestConnectedComponents:
    def test_all_in_service_single_component(self, train14):
        comps = connected_components(train14, np.ones(train14.n_lines, bool))
        assert comps == [list(train14.buses)]

    def test_all_out_one_component_per_bus(self, triangle):
        comps = connected_components(triangle, np.zeros(3, bool))
        assert comps == [[0], [1], [2]]

    def test_cut_set_splits_train14(self, train14):
        # removing every line at bus 3's boundary that reaches the rest of
        # the grid isolates the load-centre cluster; oracle = union-find
        status = np.ones(train14.n_lines, bool)
        cut = [1, 3, 5, 6, 13, 16]  # all core and chain lines into bus 3
        for ell in cut:
            status[ell] = False
        comps = connected_components(train14, status)
        assert len(comps) == _brute_force_component_count(train14, status)

    @given(st.integers(min_value=0, max_value=10_000))
    def test_matches_brute_force_on_random_specs(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_connected_spec(rng, int(rng.integers(2, 51)))
        status = rng.random(spec.n_lines) < 0.6
        comps = connected_components(spec, status)
        # deterministic ordering by smallest contained bus id
        assert [c[0] for c in comps] == sorted(c[0] for c in comps)
        assert len(comps) == _brute_force_component_count(spec, status)
        assert sorted(b for c in comps for b in c) == list(spec.buses)


def _brute_force_component_count(spec, status) -> int:
    adj = {b: set() for b in spec.buses}
    for ell, line in enumerate(spec.lines):
        if status[ell]:
            adj[line.from_bus].add(line.to_bus)
            adj[line.to_bus].add(line.from_bus)
    seen = set()
    count = 0
    for start in spec.buses:
        if start in seen:
            continue
        count += 1
        stack = [start]
        while stack:
            b = stack.pop()
            if b in seen:
                continue
            seen.add(b)
            stack.extend(adj[b] - seen)
    return count
