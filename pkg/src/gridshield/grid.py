"""Static network model and DC power-flow kernel.

A grid is an immutable description of buses, lines, generators and loads.
Power flow uses the linear DC approximation: solve B @ theta = P on the
island containing the slack bus (B is the susceptance Laplacian over
in-service lines, slack angle pinned to 0), then flow_l = b_l * (theta_from
- theta_to).  Everything is in per-unit; thermal limits are per-unit MW
magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import lu_factor, lu_solve

# Pivot magnitude below which the reduced Laplacian counts as singular.
SINGULAR_PIVOT_TOL = 1e-12


class SingularSystemError(RuntimeError):
    """Reduced susceptance matrix is numerically singular (malformed grid)."""


@dataclass(frozen=True)
class LineSpec:
    id: int
    from_bus: int
    to_bus: int
    susceptance: float
    thermal_limit: float


@dataclass(frozen=True)
class GenSpec:
    id: int
    bus: int
    p_min: float
    p_max: float
    ramp_limit: float


@dataclass(frozen=True)
class LoadSpec:
    id: int
    bus: int
    base_demand: float


@dataclass(frozen=True, eq=True)
class GridSpec:
    buses: tuple[int, ...]
    lines: tuple[LineSpec, ...]
    generators: tuple[GenSpec, ...]
    loads: tuple[LoadSpec, ...]
    slack_bus: int

    def __hash__(self) -> int:
        # memoized: specs are immutable and hashed on every cache lookup
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((self.buses, self.lines, self.generators, self.loads, self.slack_bus))
            object.__setattr__(self, "_hash", h)
        return h

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_gens(self) -> int:
        return len(self.generators)

    @property
    def n_loads(self) -> int:
        return len(self.loads)


@dataclass(frozen=True)
class PowerFlowSolution:
    """Solved DC state.

    angles: per-bus voltage angle (rad), slack = 0, de-energised islands = 0.
    flows: per-line signed MW; 0 for out-of-service lines.
    rho: per-line loading ratio |flow| / thermal_limit.
    feasible: False when any load or generator sits outside the slack island.
    injections: per-bus net injection actually solved against (slack absorbs
        the island imbalance; buses off the slack island are zeroed).
    """

    angles: np.ndarray
    flows: np.ndarray
    rho: np.ndarray
    feasible: bool
    injections: np.ndarray


@dataclass(frozen=True)
class _CompiledSpec:
    """Index arrays derived from a GridSpec, cached for the hot path."""

    bus_index: dict[int, int]
    from_idx: np.ndarray
    to_idx: np.ndarray
    susceptance: np.ndarray
    limits: np.ndarray
    gen_bus_idx: np.ndarray
    load_bus_idx: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    ramp: np.ndarray
    base_demand: np.ndarray
    slack_idx: int


@lru_cache(maxsize=64)
def compiled(spec: GridSpec) -> _CompiledSpec:
    bus_index = {b: i for i, b in enumerate(spec.buses)}
    return _CompiledSpec(
        bus_index=bus_index,
        from_idx=np.array([bus_index[l.from_bus] for l in spec.lines], dtype=np.intp),
        to_idx=np.array([bus_index[l.to_bus] for l in spec.lines], dtype=np.intp),
        susceptance=np.array([l.susceptance for l in spec.lines], dtype=float),
        limits=np.array([l.thermal_limit for l in spec.lines], dtype=float),
        gen_bus_idx=np.array([bus_index[g.bus] for g in spec.generators], dtype=np.intp),
        load_bus_idx=np.array([bus_index[d.bus] for d in spec.loads], dtype=np.intp),
        p_min=np.array([g.p_min for g in spec.generators], dtype=float),
        p_max=np.array([g.p_max for g in spec.generators], dtype=float),
        ramp=np.array([g.ramp_limit for g in spec.generators], dtype=float),
        base_demand=np.array([d.base_demand for d in spec.loads], dtype=float),
        slack_idx=bus_index[spec.slack_bus],
    )


def validate_spec(spec: GridSpec) -> list[str]:
    """Check GridSpec invariants; returns a list of violations (empty = ok)."""
    violations: list[str] = []
    declared = set(spec.buses)
    if len(declared) != len(spec.buses):
        violations.append("duplicate bus ids")
    line_ids = [l.id for l in spec.lines]
    if len(set(line_ids)) != len(line_ids):
        violations.append("duplicate line ids")
    for line in spec.lines:
        if line.from_bus not in declared or line.to_bus not in declared:
            violations.append(f"line {line.id}: endpoint not a declared bus")
        if line.from_bus == line.to_bus:
            violations.append(f"line {line.id}: from_bus equals to_bus")
        if not line.thermal_limit > 0:
            violations.append(f"line {line.id}: thermal_limit must be > 0")
        if not line.susceptance > 0:
            violations.append(f"line {line.id}: susceptance must be > 0")
    for gen in spec.generators:
        if gen.bus not in declared:
            violations.append(f"generator {gen.id}: bus not declared")
        if not 0 <= gen.p_min <= gen.p_max:
            violations.append(f"generator {gen.id}: requires 0 <= p_min <= p_max")
        if not gen.ramp_limit > 0:
            violations.append(f"generator {gen.id}: ramp_limit must be > 0")
    for load in spec.loads:
        if load.bus not in declared:
            violations.append(f"load {load.id}: bus not declared")
        if load.base_demand < 0:
            violations.append(f"load {load.id}: base_demand must be >= 0")
    if spec.slack_bus not in declared:
        violations.append("slack_bus is not a declared bus")
    elif not any(g.bus == spec.slack_bus for g in spec.generators):
        violations.append("slack_bus hosts no generator")
    if spec.buses and spec.slack_bus in declared:
        all_in = np.ones(spec.n_lines, dtype=bool)
        if len(connected_components(spec, all_in)) > 1:
            violations.append("grid graph is disconnected (over all lines)")
    return violations


class _UnionFind:
    """Union-find with path compression over integer bus indices."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


# Topologies recur heavily across steps and lookahead queries; labels are a
# pure function of (spec, status), so memoize them.
_LABELS_CACHE: dict[tuple, np.ndarray] = {}
_LABELS_CACHE_MAX = 65536


def _component_labels(spec: GridSpec, line_status: np.ndarray) -> np.ndarray:
    """Per-bus component label (root bus index) over in-service lines."""
    key = (hash(spec), line_status.tobytes())
    hit = _LABELS_CACHE.get(key)
    if hit is not None:
        return hit
    c = compiled(spec)
    uf = _UnionFind(spec.n_buses)
    for ell in np.flatnonzero(line_status):
        uf.union(int(c.from_idx[ell]), int(c.to_idx[ell]))
    labels = np.array([uf.find(i) for i in range(spec.n_buses)], dtype=np.intp)
    labels.setflags(write=False)
    if len(_LABELS_CACHE) >= _LABELS_CACHE_MAX:
        _LABELS_CACHE.clear()
    _LABELS_CACHE[key] = labels
    return labels


def connected_components(spec: GridSpec, line_status: np.ndarray) -> list[list[int]]:
    """Partition buses into maximal components over in-service lines.

    Components are ordered by their smallest contained bus id; bus ids inside
    each component are sorted ascending.
    """
    labels = _component_labels(spec, np.asarray(line_status, dtype=bool))
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(spec.buses[i])
    comps = [sorted(g) for g in groups.values()]
    return sorted(comps, key=lambda g: g[0])


# The reduced Laplacian depends only on (spec, topology); episodes solve the
# same topology step after step with fresh injections, so the factorization
# is memoized.
_FACTOR_CACHE: dict[tuple, tuple] = {}
_FACTOR_CACHE_MAX = 16384


def _reduced_factorization(
    spec: GridSpec, status: np.ndarray, active: np.ndarray, red: np.ndarray
):
    key = (hash(spec), status.tobytes())
    hit = _FACTOR_CACHE.get(key)
    if hit is not None:
        return hit
    c = compiled(spec)
    n = spec.n_buses
    b_full = np.zeros((n, n))
    fi, ti = c.from_idx[active], c.to_idx[active]
    bs = c.susceptance[active]
    np.add.at(b_full, (fi, fi), bs)
    np.add.at(b_full, (ti, ti), bs)
    np.add.at(b_full, (fi, ti), -bs)
    np.add.at(b_full, (ti, fi), -bs)
    b_red = b_full[np.ix_(red, red)]
    lu, piv = lu_factor(b_red, check_finite=False)
    if np.abs(np.diag(lu)).min() < SINGULAR_PIVOT_TOL:
        raise SingularSystemError("reduced susceptance matrix is singular")
    if len(_FACTOR_CACHE) >= _FACTOR_CACHE_MAX:
        _FACTOR_CACHE.clear()
    _FACTOR_CACHE[key] = (lu, piv)
    return (lu, piv)


def solve_dc_power_flow(
    spec: GridSpec, injections: np.ndarray, line_status: np.ndarray
) -> PowerFlowSolution:
    """Solve DC power flow on the slack island.

    injections: per-bus net power aligned with spec.buses order.  Any island
    imbalance is absorbed by the slack bus (standard DC convention), so
    callers need not pre-balance.  Buses outside the slack island are left
    de-energised (angle 0, zero injection); the solution is flagged
    infeasible when a load or generator is stranded there.
    """
    c = compiled(spec)
    injections = np.asarray(injections, dtype=float)
    status = np.asarray(line_status, dtype=bool)
    n = spec.n_buses

    labels = _component_labels(spec, status)
    in_island = labels == labels[c.slack_idx]
    feasible = bool(np.all(in_island[c.gen_bus_idx]) and np.all(in_island[c.load_bus_idx]))

    active = status & in_island[c.from_idx]

    balanced = np.where(in_island, injections, 0.0)
    balanced[c.slack_idx] = 0.0
    balanced[c.slack_idx] = -balanced.sum()

    red = np.flatnonzero(in_island & (np.arange(n) != c.slack_idx))
    angles = np.zeros(n)
    if red.size:
        lu_piv = _reduced_factorization(spec, status, active, red)
        angles[red] = lu_solve(lu_piv, balanced[red], check_finite=False)

    flows = np.where(
        active, c.susceptance * (angles[c.from_idx] - angles[c.to_idx]), 0.0
    )
    rho = np.abs(flows) / c.limits
    return PowerFlowSolution(
        angles=angles, flows=flows, rho=rho, feasible=feasible, injections=balanced
    )


def loading_ratios(solution: PowerFlowSolution) -> np.ndarray:
    """Per-line loading ratio |flow| / thermal_limit of a solved state."""
    return solution.rho


def max_loading(rho: np.ndarray) -> float:
    """Peak loading ratio across all lines."""
    rho = np.asarray(rho, dtype=float)
    if rho.size == 0:
        raise ValueError("max_loading of an empty rho vector")
    return float(rho.max())


def safety_margin(rho: np.ndarray) -> float:
    """Instantaneous distance to the nearest thermal violation, 1 - max rho.

    Negative when some line is overloaded.
    """
    return 1.0 - max_loading(rho)
