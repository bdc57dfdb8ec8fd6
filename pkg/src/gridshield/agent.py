"""Size-invariant observation features, categorical policy and hierarchical
action grounding.

The policy consumes a fixed-length aggregate of the grid state (top-k
loadings, margin, demand ratio, ...) and emits logits over five abstract
intents.  A low-level executor grounds each intent to a concrete primitive
on whatever grid is in front of it, which is what lets one parameter vector
drive grids of different sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache

import numpy as np

from . import environment as env
from . import shield as shield_mod
from .environment import Action, EnvConfig, EnvState, NOOP
from .grid import GridSpec, compiled
from .shield import ShieldConfig, ShieldDecision, ShieldMode

FEATURE_DIM = 11
TOP_K = 5
HIGH_LOAD_THRESHOLD = 0.9
HIDDEN_SIZES = (64, 64)


class AbstractAction(IntEnum):
    HOLD = 0
    RELIEVE_RANK1 = 1
    RELIEVE_RANK2 = 2
    RELIEVE_RANK3 = 3
    RESTORE_LINE = 4


N_ABSTRACT = len(AbstractAction)


class AgentVariant(Enum):
    FLAT = "flat"
    SHIELD_ONLY = "shield_only"
    HIERARCHY_ONLY = "hierarchy_only"
    HIERARCHY_SHIELD = "hierarchy_shield"
    HIERARCHY_CBF = "hierarchy_cbf"


# Shield mode each variant runs with.
VARIANT_SHIELD_MODE = {
    AgentVariant.FLAT: ShieldMode.OFF,
    AgentVariant.SHIELD_ONLY: ShieldMode.VETO,
    AgentVariant.HIERARCHY_ONLY: ShieldMode.OFF,
    AgentVariant.HIERARCHY_SHIELD: ShieldMode.PROJECTION,
    AgentVariant.HIERARCHY_CBF: ShieldMode.CBF_MASK,
}


def extract_features(state: EnvState, spec: GridSpec) -> np.ndarray:
    """Fixed-length feature vector, independent of grid size.

    Layout: top-5 loading ratios (descending, zero-padded), fraction of
    lines above 0.9, mean loading, safety margin, fraction of lines out of
    service, total demand / total capacity, time remaining fraction.
    """
    c = compiled(spec)
    rho = state.last_solution.rho
    top = np.sort(rho)[::-1][:TOP_K]
    padded = np.zeros(TOP_K)
    padded[: top.size] = top
    n_lines = rho.size
    features = np.empty(FEATURE_DIM)
    features[:TOP_K] = padded
    features[5] = np.count_nonzero(rho > HIGH_LOAD_THRESHOLD) / n_lines
    features[6] = rho.mean()
    features[7] = 1.0 - rho.max()
    features[8] = 1.0 - state.line_status.mean()
    features[9] = state.load_demands.sum() / c.p_max.sum()
    features[10] = 1.0 - state.t / state.horizon
    return features


@dataclass
class PolicyParams:
    """Feed-forward net: input -> H1 -> H2 -> logits, rectified hiddens."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def layers(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*[a.copy() for a in self.layers()])

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.w1.shape[0], self.w1.shape[1], self.w2.shape[1], self.w3.shape[1])

    def n_params(self) -> int:
        return sum(a.size for a in self.layers())


def init_policy_params(
    seed: int,
    input_dim: int = FEATURE_DIM,
    hidden: tuple[int, int] = HIDDEN_SIZES,
    n_actions: int = N_ABSTRACT,
) -> PolicyParams:
    """Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero."""
    rng = np.random.default_rng(seed)
    dims = (input_dim, hidden[0], hidden[1], n_actions)

    def layer(fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out)), np.zeros(fan_out)

    w1, b1 = layer(dims[0], dims[1])
    w2, b2 = layer(dims[1], dims[2])
    w3, b3 = layer(dims[2], dims[3])
    return PolicyParams(w1, b1, w2, b2, w3, b3)


def policy_logits(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single feature vector or a batch."""
    h1 = np.maximum(x @ params.w1 + params.b1, 0.0)
    h2 = np.maximum(h1 @ params.w2 + params.b2, 0.0)
    return h2 @ params.w3 + params.b3


def action_distribution(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max subtraction); rows sum to 1."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_abstract(dist: np.ndarray, rng: np.random.Generator) -> AbstractAction:
    """Inverse-CDF sample from a categorical distribution."""
    r = rng.random()
    cum = np.cumsum(dist)
    idx = int(np.searchsorted(cum, r, side="right"))
    return AbstractAction(min(idx, dist.size - 1))


def ranked_lines(state: EnvState) -> list[int]:
    """In-service lines ordered by loading, heaviest first (ties by id)."""
    rho = state.last_solution.rho
    in_service = np.flatnonzero(state.line_status)
    return sorted((int(l) for l in in_service), key=lambda l: (-rho[l], l))


def _neighborhood(spec: GridSpec, target: int, state: EnvState) -> list[int]:
    """In-service lines sharing a bus with the target line, target included."""
    c = compiled(spec)
    buses = {int(c.from_idx[target]), int(c.to_idx[target])}
    out = []
    for ell in range(spec.n_lines):
        if not state.line_status[ell]:
            continue
        if int(c.from_idx[ell]) in buses or int(c.to_idx[ell]) in buses:
            out.append(ell)
    return out


def _longest_out_reconnect(state: EnvState) -> Action:
    eligible = np.flatnonzero((~state.line_status) & (state.cooldowns == 0))
    if eligible.size == 0:
        return NOOP
    best = max((int(l) for l in eligible), key=lambda l: (state.out_steps[l], -l))
    return env.reconnect(best)


def ground_action(
    abstract: AbstractAction, state: EnvState, spec: GridSpec, config: EnvConfig
) -> Action:
    """Model-based executor for abstract intents.

    Relieve-rank-k searches the neighborhood of the k-th most loaded line
    for the disconnection with the lowest predicted peak loading (no
    admissibility filtering; the executor alone gives no safety guarantee).
    Falls back to NoOp when every candidate would island load or generation.
    """
    if abstract is AbstractAction.HOLD:
        return NOOP
    if abstract is AbstractAction.RESTORE_LINE:
        return _longest_out_reconnect(state)

    rank = int(abstract)  # RELIEVE_RANK1..3 -> 1..3
    ranked = ranked_lines(state)
    if rank > len(ranked):
        return NOOP
    target = ranked[rank - 1]
    best: tuple[float, int] | None = None
    for ell in _neighborhood(spec, target, state):
        pred = shield_mod.predict(state, env.disconnect(ell), spec)
        score = pred.max_rho
        if best is None or (score, ell) < best:
            best = (score, ell)
    if best is None or not np.isfinite(best[0]):
        return NOOP
    return env.disconnect(best[1])


@lru_cache(maxsize=64)
def base_ranking(spec: GridSpec) -> tuple[int, ...]:
    """Line ids ordered by base-dispatch loading, heaviest first."""
    setpoints = env.base_dispatch(spec)
    c = compiled(spec)
    solution = env.solve_state(spec, setpoints, c.base_demand, np.ones(spec.n_lines, bool))
    return tuple(sorted(range(spec.n_lines), key=lambda l: (-solution.rho[l], l)))


def ground_action_direct(
    abstract: AbstractAction, state: EnvState, spec: GridSpec, config: EnvConfig
) -> Action:
    """Flat grounding: each intent is a fixed concrete primitive with no
    lookahead.  Relieve-rank-k disconnects the line holding rank k in the
    base-dispatch loading order, the way a flat policy's outputs are bound
    to fixed action indices."""
    if abstract is AbstractAction.HOLD:
        return NOOP
    if abstract is AbstractAction.RESTORE_LINE:
        return _longest_out_reconnect(state)
    rank = int(abstract)
    ranked = base_ranking(spec)
    if rank > len(ranked):
        return NOOP
    return env.disconnect(ranked[rank - 1])


@dataclass(frozen=True)
class ActResult:
    """One executed action plus full decision provenance."""

    decision: ShieldDecision
    abstract: AbstractAction | None
    # Mask applied to the intent distribution before sampling (all-true when
    # no masking happened); needed to reconstruct log-probabilities.
    mask: np.ndarray | None


def _policy_sample(
    params: PolicyParams,
    state: EnvState,
    spec: GridSpec,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> AbstractAction:
    x = extract_features(state, spec)
    dist = action_distribution(policy_logits(params, x))
    if mask is not None:
        dist = dist * mask
        dist = dist / dist.sum()
    return sample_abstract(dist, rng)


def act(
    variant: AgentVariant,
    params: PolicyParams | None,
    state: EnvState,
    spec: GridSpec,
    shield_cfg: ShieldConfig,
    rng: np.random.Generator,
    env_cfg: EnvConfig = EnvConfig(),
) -> ActResult:
    """Fixed inference-time loop for one decision.

    Flat / hierarchy-only run unshielded; shield-only vetoes a uniformly
    random feasible concrete action; hierarchy+shield projects; hierarchy+CBF
    masks the grounded intents before sampling so no veto can occur.
    """
    expected = VARIANT_SHIELD_MODE[variant]
    if shield_cfg.mode is not expected:
        raise ValueError(f"{variant.value} requires shield mode {expected.value}")

    if variant is AgentVariant.SHIELD_ONLY:
        actions = env.enumerate_actions(spec, env_cfg)
        mask = env.feasible_actions(state, spec, env_cfg)
        feasible = [a for a, ok in zip(actions, mask) if ok]
        proposed = feasible[int(rng.integers(len(feasible)))]
        return ActResult(
            decision=shield_mod.project(state, proposed, spec, shield_cfg),
            abstract=None,
            mask=None,
        )

    if variant is AgentVariant.HIERARCHY_CBF:
        grounded = [
            ground_action(a, state, spec, env_cfg) for a in AbstractAction
        ]
        mask = shield_mod.cbf_mask(state, grounded, spec, shield_cfg)
        abstract = _policy_sample(params, state, spec, rng, mask=mask)
        executed = grounded[int(abstract)]
        pred = shield_mod.predict(state, executed, spec)
        admissible = pred.feasible and pred.max_rho <= shield_cfg.rho_max
        decision = ShieldDecision(
            executed=executed,
            proposed=executed,
            vetoed=False,
            corrected=False,
            predicted_rho_max=pred.max_rho,
            l0_distance=0,
            last_resort=not admissible,
        )
        return ActResult(decision=decision, abstract=abstract, mask=mask)

    abstract = _policy_sample(params, state, spec, rng)
    if variant is AgentVariant.FLAT:
        proposed = ground_action_direct(abstract, state, spec, env_cfg)
        decision = shield_mod.identity_decision(state, proposed, spec)
    elif variant is AgentVariant.HIERARCHY_ONLY:
        proposed = ground_action(abstract, state, spec, env_cfg)
        decision = shield_mod.identity_decision(state, proposed, spec)
    else:  # HIERARCHY_SHIELD
        proposed = ground_action(abstract, state, spec, env_cfg)
        decision = shield_mod.project(state, proposed, spec, shield_cfg)
    return ActResult(decision=decision, abstract=abstract, mask=None)


def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^t * r_t."""
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        return 0.0
    return float(np.dot(gamma ** np.arange(rewards.size), rewards))
