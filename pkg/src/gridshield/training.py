"""Policy-gradient training: REINFORCE with a mean-return baseline and a
hand-rolled Adam optimizer.

The gradient estimate is the batch mean over trajectories of
sum_t grad log pi(a_t | x_t) * (G - b), where G is the trajectory's
discounted return and b the batch mean return.  Masked steps (CBF variant)
use the renormalized distribution, i.e. a softmax restricted to the open
intents, so log-probabilities stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import agent as agent_mod
from . import environment as env
from .agent import AgentVariant, PolicyParams, discounted_return, init_policy_params
from .environment import EnvConfig
from .grid import GridSpec
from .shield import ShieldConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    discount: float = 0.99
    episodes_per_update: int = 4
    total_updates: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    baseline: str = "mean_return"


@dataclass
class Trajectory:
    features: np.ndarray  # (T, FEATURE_DIM)
    actions: np.ndarray   # (T,) abstract intent indices
    rewards: np.ndarray   # (T,)
    masks: np.ndarray     # (T, N_ABSTRACT) bool; all-true when unmasked


@dataclass
class UpdateDiagnostics:
    mean_return: float
    grad_norm: float


class AdamOptimizer:
    """Adaptive-moment gradient ascent over the policy's parameter list."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.steps = 0

    def update(self, params: PolicyParams, grads: list[np.ndarray]) -> PolicyParams:
        layers = params.layers()
        if self.m is None:
            self.m = [np.zeros_like(a) for a in layers]
            self.v = [np.zeros_like(a) for a in layers]
        self.steps += 1
        b1, b2, eps, lr = (
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.epsilon,
            self.cfg.learning_rate,
        )
        new_layers = []
        for i, (theta, g) in enumerate(zip(layers, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.steps)
            v_hat = self.v[i] / (1 - b2**self.steps)
            new_layers.append(theta + lr * m_hat / (np.sqrt(v_hat) + eps))
        return PolicyParams(*new_layers)


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Backward recursion G_t = r_t + gamma * G_{t+1}."""
    out = np.zeros_like(rewards, dtype=float)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _masked_log_softmax(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to open entries (closed entries get
    probability 0).  Returns probabilities, not logs."""
    z = np.where(masks, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_objective_and_grads(
    params: PolicyParams, trajectories: list[Trajectory], cfg: TrainConfig
) -> tuple[float, list[np.ndarray], UpdateDiagnostics]:
    """Surrogate objective J and its analytic gradient.

    J = (1/n_traj) * sum over steps of log pi(a|x) * advantage, where each
    step's advantage is its trajectory's discounted return minus the batch
    mean return (both constants w.r.t. theta).
    """
    if not trajectories:
        raise ValueError("policy gradient update requires at least one trajectory")

    xs = np.concatenate([tr.features for tr in trajectories], axis=0)
    acts = np.concatenate([tr.actions for tr in trajectories], axis=0)
    masks = np.concatenate([tr.masks for tr in trajectories], axis=0)
    episode_returns = [discounted_return(tr.rewards, cfg.discount) for tr in trajectories]
    baseline = float(np.mean(episode_returns))
    adv = np.concatenate(
        [np.full(tr.rewards.size, g - baseline) for tr, g in zip(trajectories, episode_returns)]
    )
    n_traj = len(trajectories)

    # Forward pass with cached pre-activations.
    z1 = xs @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    logits = h2 @ params.w3 + params.b3
    probs = _masked_log_softmax(logits, masks)

    rows = np.arange(acts.size)
    log_p = np.log(probs[rows, acts])
    objective = float(np.sum(log_p * adv) / n_traj)

    # Backward pass: dJ/dlogits = (onehot - p) * adv / n_traj.
    d_logits = -probs * (adv / n_traj)[:, None]
    d_logits[rows, acts] += adv / n_traj

    g_w3 = h2.T @ d_logits
    g_b3 = d_logits.sum(axis=0)
    d_h2 = (d_logits @ params.w3.T) * (z2 > 0)
    g_w2 = h1.T @ d_h2
    g_b2 = d_h2.sum(axis=0)
    d_h1 = (d_h2 @ params.w2.T) * (z1 > 0)
    g_w1 = xs.T @ d_h1
    g_b1 = d_h1.sum(axis=0)

    grads = [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    mean_return = float(
        np.mean([discounted_return(tr.rewards, cfg.discount) for tr in trajectories])
    )
    return objective, grads, UpdateDiagnostics(mean_return, grad_norm)


def policy_gradient_update(
    params: PolicyParams,
    trajectories: list[Trajectory],
    cfg: TrainConfig,
    optimizer: AdamOptimizer | None = None,
) -> tuple[PolicyParams, UpdateDiagnostics]:
    """One REINFORCE step.  A fresh optimizer is used when none is passed
    (single-shot usage); training loops carry one across updates."""
    if optimizer is None:
        optimizer = AdamOptimizer(cfg)
    _, grads, diag = policy_objective_and_grads(params, trajectories, cfg)
    return optimizer.update(params, grads), diag


def rollout(
    spec: GridSpec,
    env_cfg: EnvConfig,
    variant: AgentVariant,
    params: PolicyParams,
    shield_cfg: ShieldConfig,
    seed: int,
) -> Trajectory:
    """One episode collecting (features, intent, reward) per step."""
    state = env.reset(spec, env_cfg, seed)
    feats, acts, rews, masks = [], [], [], []
    while True:
        x = agent_mod.extract_features(state, spec)
        res = agent_mod.act(variant, params, state, spec, shield_cfg, state.rng, env_cfg)
        outcome = env.step(state, res.decision.executed, spec, env_cfg)
        feats.append(x)
        acts.append(int(res.abstract))
        rews.append(outcome.reward)
        masks.append(
            res.mask.copy() if res.mask is not None else np.ones(agent_mod.N_ABSTRACT, bool)
        )
        state = outcome.next_state
        if outcome.terminated:
            break
    return Trajectory(
        features=np.array(feats),
        actions=np.array(acts, dtype=np.intp),
        rewards=np.array(rews),
        masks=np.array(masks, dtype=bool),
    )


@dataclass
class TrainResult:
    params: PolicyParams
    mean_returns: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)


def train(
    spec: GridSpec,
    env_cfg: EnvConfig,
    train_cfg: TrainConfig,
    shield_cfg: ShieldConfig,
    variant: AgentVariant,
    seed: int,
) -> TrainResult:
    """Train the intent policy with the same act pathway used at evaluation
    time (the shield is active during training iff the variant carries it)."""
    if variant is AgentVariant.SHIELD_ONLY:
        raise ValueError("shield_only uses a random proposer; nothing to train")
    if train_cfg.baseline != "mean_return":
        raise ValueError(f"unknown baseline {train_cfg.baseline!r}")

    params = init_policy_params(seed)
    optimizer = AdamOptimizer(train_cfg)
    result = TrainResult(params=params)
    episode_index = 0
    for _ in range(train_cfg.total_updates):
        batch = []
        for _ in range(train_cfg.episodes_per_update):
            ep_seed = seed * 1_000_000 + episode_index
            batch.append(rollout(spec, env_cfg, variant, params, shield_cfg, ep_seed))
            episode_index += 1
        params, diag = policy_gradient_update(params, batch, train_cfg, optimizer)
        result.mean_returns.append(diag.mean_return)
        result.grad_norms.append(diag.grad_norm)
    result.params = params
    return result
