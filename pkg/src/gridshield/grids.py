"""Builtin synthetic grids: toy5, train14, large36.

All three share one construction so behaviour learned on one transfers to
the others:

* A four-bus core: generation hub (bus 0, slack), two intermediate buses and
  the main load centre (bus 3).  Two strong corridors, two weak arms and a
  heavily-coupled cross tie between the intermediates.  The tie concentrates
  loop flow onto the corridors, so switching it out lowers the peak loading
  from 0.60 to about 0.48; its own limit is generous, which keeps it far
  down the loading ranking.
* A chain 3-4-5-6-0 with mid-chain generation sized so the segment entering
  the hub (6-0) carries almost nothing in either quiescent topology but
  floods past its limit when a main corridor is lost.  Its relief is a
  switching action (shed the chain from one end), not a reconnection, so a
  cooldown cannot mask it.
* A generator loop off the load centre whose feeder sits near 0.4 loading
  in the relaxed topology; once the tie is out this feeder becomes the
  highest-loaded line, and losing it is benign (the loop reroutes locally).
* Everything else is loops, never trees, so no single peripheral line cut
  islands load or generation, and several cuts degrade the margin without
  crossing the admissibility threshold.

Thermal limits are sized at generation time: per-line provisional limit
(|base flow| + 8% of the largest flow, times a per-line headroom factor),
scaled uniformly so the base dispatch loads the worst line to LIMIT_TARGET.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import environment as env
from .grid import GenSpec, GridSpec, LineSpec, LoadSpec, validate_spec

LIMIT_TARGET = 0.6
FLOW_FLOOR_FRACTION = 0.08

BUILTIN_NAMES = ("toy5", "train14", "large36")

# (from, to, susceptance, headroom)
_CORE = (
    (0, 1, 30.0, 1.00),  # main corridor
    (1, 3, 4.0, 3.00),   # arm
    (0, 2, 4.0, 3.00),   # arm
    (2, 3, 30.0, 1.00),  # main corridor
    (1, 2, 80.0, 6.00),  # cross tie
    (0, 3, 1.8, 6.00),   # long backup corridor
)

# train14 body beyond the core; line ids continue from 6.
_T14_LINES = (
    # chain 3-4-5-6-0; segment 6-0 (line 9) is the tight stress victim,
    # sized so the loss of either main corridor overloads it
    (3, 4, 8.0, 2.40), (4, 5, 8.0, 1.80), (5, 6, 8.0, 1.80), (6, 0, 8.0, 1.28),
    # loop 1-7-8-2 between the intermediates; absorbs the tie's shunt flow
    (1, 7, 3.0, 1.60), (7, 8, 3.0, 1.60), (8, 2, 3.0, 1.60),
    # generator loop off the load centre; the feeder 11-3 runs warm and the
    # whole loop is tight, so cutting any of it leaves a lasting dent
    (3, 9, 2.0, 1.05), (9, 10, 2.0, 1.05), (10, 11, 2.0, 1.05), (11, 3, 3.0, 0.98),
    # loop off the chain; losing either outer segment pushes the survivor
    # past the admissibility threshold, so the shield refuses those cuts
    (5, 12, 4.0, 1.00), (12, 13, 6.0, 1.90), (13, 6, 3.0, 1.00),
)
_T14_LOADS = (
    (3, 1.20),
    (4, 0.15), (5, 0.15), (6, 0.15),
    (7, 0.12), (8, 0.12),
    (9, 0.10), (10, 0.10), (11, 0.10),
    (12, 0.06), (13, 0.14),
)
_T14_GENS = (
    (0, 0, 3.0, 0.30),    # hub
    (1, 6, 1.55, 0.15),   # mid-chain, cancels the victim segment's base flow
    (2, 11, 0.8, 0.10),   # loop generator
)


class UnknownGridError(KeyError):
    """Requested builtin grid name does not exist."""


def _finalize(
    name: str,
    buses: tuple[int, ...],
    raw_lines: tuple[tuple[int, int, float, float], ...],
    gens: tuple[GenSpec, ...],
    loads: tuple[LoadSpec, ...],
    slack: int,
) -> GridSpec:
    """Size limits from the base-dispatch flow pattern and build the spec."""
    provisional = GridSpec(
        buses=buses,
        lines=tuple(
            LineSpec(i, f, t, b, 1.0) for i, (f, t, b, _) in enumerate(raw_lines)
        ),
        generators=gens,
        loads=loads,
        slack_bus=slack,
    )
    setpoints = env.base_dispatch(provisional)
    demands = np.array([d.base_demand for d in loads])
    solution = env.solve_state(
        provisional, setpoints, demands, np.ones(len(raw_lines), dtype=bool)
    )
    abs_flow = np.abs(solution.flows)
    headroom = np.array([h for (_, _, _, h) in raw_lines])
    raw_limits = (abs_flow + FLOW_FLOOR_FRACTION * abs_flow.max()) * headroom
    scale = float((abs_flow / raw_limits).max()) / LIMIT_TARGET
    limits = raw_limits * scale
    spec = GridSpec(
        buses=buses,
        lines=tuple(
            LineSpec(i, f, t, b, float(limits[i]))
            for i, (f, t, b, _) in enumerate(raw_lines)
        ),
        generators=gens,
        loads=loads,
        slack_bus=slack,
    )
    violations = validate_spec(spec)
    if violations:
        raise AssertionError(f"builtin grid {name} failed validation: {violations}")
    return spec


@lru_cache(maxsize=None)
def _toy5() -> GridSpec:
    # Core without the backup corridor (6 lines total), plus a leaf load
    # whose only feeder islands it when cut.
    lines = _CORE[:5] + ((3, 4, 8.0, 2.0),)
    return _finalize(
        "toy5",
        buses=tuple(range(5)),
        raw_lines=lines,
        gens=(GenSpec(0, 0, 0.0, 2.0, 0.25),),
        loads=(LoadSpec(0, 3, 1.0), LoadSpec(1, 4, 0.3)),
        slack=0,
    )


@lru_cache(maxsize=None)
def _train14() -> GridSpec:
    return _finalize(
        "train14",
        buses=tuple(range(14)),
        raw_lines=_CORE + _T14_LINES,
        gens=tuple(GenSpec(i, b, 0.0, p, r) for (i, b, p, r) in _T14_GENS),
        loads=tuple(LoadSpec(i, b, d) for i, (b, d) in enumerate(_T14_LOADS)),
        slack=0,
    )


@lru_cache(maxsize=None)
def _large36() -> GridSpec:
    # train14's topology embedded unchanged, plus a 22-bus ring (buses
    # 14..35) tied in with weak spokes.  The ring hosts its own generation
    # sized to cover its loads, so the core flow pattern and its stress
    # behaviour carry over from train14.
    lines = list(_CORE + _T14_LINES)
    ring = list(range(14, 36))
    for i, b in enumerate(ring):
        nxt = ring[(i + 1) % len(ring)]
        lines.append((b, nxt, 1.8, 2.0))
    spokes = [
        (14, 0), (16, 2), (18, 3), (20, 7), (22, 10), (24, 0), (26, 2),
        (28, 3), (30, 12), (32, 1), (34, 9), (15, 4), (25, 8),
    ]
    lines += [(a, b, 1.5, 2.0) for (a, b) in spokes]

    loads = list(_T14_LOADS)
    rng = np.random.default_rng(3600)
    ring_loads = [b for b in ring if b % 3 != 0]  # 14 of the 22 ring buses
    for b in ring_loads:
        loads.append((b, float(np.round(0.05 + 0.04 * rng.random(), 3))))
    total_ring_load = sum(d for (b, d) in loads if b >= 14)

    gens = [GenSpec(i, b, 0.0, p, r) for (i, b, p, r) in _T14_GENS]
    # Ring generation scaled so the shared dispatch fraction stays at
    # train14's value and the core sees the same injections.
    t14_demand = sum(d for (_, d) in _T14_LOADS)
    t14_cap = sum(p for (_, _, p, _) in _T14_GENS)
    gens.append(GenSpec(3, 24, 0.0, total_ring_load * t14_cap / t14_demand, 0.2))

    return _finalize(
        "large36",
        buses=tuple(range(36)),
        raw_lines=tuple(lines),
        gens=tuple(gens),
        loads=tuple(LoadSpec(i, b, d) for i, (b, d) in enumerate(loads)),
        slack=0,
    )


def builtin_grid(name: str) -> GridSpec:
    """toy5 (oracle scale), train14 (training grid) or large36 (zero-shot
    deployment target, larger and never trained on)."""
    if name == "toy5":
        return _toy5()
    if name == "train14":
        return _train14()
    if name == "large36":
        return _large36()
    raise UnknownGridError(f"unknown builtin grid {name!r}; expected one of {BUILTIN_NAMES}")
