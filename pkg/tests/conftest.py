import hypothesis
import numpy as np
import pytest

from gridshield.grid import GenSpec, GridSpec, LineSpec, LoadSpec
from gridshield.grids import builtin_grid

hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=40
)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def toy5():
    return builtin_grid("toy5")


@pytest.fixture(scope="session")
def train14():
    return builtin_grid("train14")


@pytest.fixture(scope="session")
def large36():
    return builtin_grid("large36")


@pytest.fixture
def two_bus():
    """Gen at slack feeding one load over a single line."""
    return GridSpec(
        buses=(0, 1),
        lines=(LineSpec(0, 0, 1, 1.0, 1.0),),
        generators=(GenSpec(0, 0, 0.0, 2.0, 0.5),),
        loads=(LoadSpec(0, 1, 1.0),),
        slack_bus=0,
    )


@pytest.fixture
def triangle():
    """Three buses, equal susceptances, gen at slack, load at bus 2."""
    return GridSpec(
        buses=(0, 1, 2),
        lines=(
            LineSpec(0, 0, 1, 1.0, 1.0),
            LineSpec(1, 0, 2, 1.0, 1.0),
            LineSpec(2, 1, 2, 1.0, 1.0),
        ),
        generators=(GenSpec(0, 0, 0.0, 2.0, 0.5),),
        loads=(LoadSpec(0, 2, 1.0),),
        slack_bus=0,
    )


def random_connected_spec(rng: np.random.Generator, n_buses: int) -> GridSpec:
    """Random spanning tree plus extra chords, positive susceptances."""
    lines = []
    for b in range(1, n_buses):
        other = int(rng.integers(0, b))
        lines.append((other, b))
    n_extra = int(rng.integers(0, n_buses))
    for _ in range(n_extra):
        u, v = rng.integers(0, n_buses, size=2)
        if u != v:
            lines.append((int(min(u, v)), int(max(u, v))))
    line_specs = tuple(
        LineSpec(i, u, v, float(rng.uniform(1.0, 20.0)), float(rng.uniform(0.5, 2.0)))
        for i, (u, v) in enumerate(lines)
    )
    gen_bus = 0
    load_bus = int(rng.integers(0, n_buses))
    return GridSpec(
        buses=tuple(range(n_buses)),
        lines=line_specs,
        generators=(GenSpec(0, gen_bus, 0.0, 5.0, 0.5),),
        loads=(LoadSpec(0, load_bus, float(rng.uniform(0.1, 2.0))),),
        slack_bus=0,
    )
