"""Trust-region policy optimization with a Gaussian policy and GAE.

The policy/value nets consume an encoded observation: the planar position x
is dropped (the dynamics are translation invariant) and a time fraction is
appended so fixed-length episodes stay Markovian. Natural-gradient steps come
from conjugate gradient on Fisher-vector products, followed by a KL-bounded
backtracking line search.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import nets
from .hopper import ACTION_DIM, STATE_DIM, EnvAction, EnvParams, rollout
from .nets import DenseNet, GradientSet, IDENTITY, RELU, SgdConfig

ENC_DIM = 8  # y, theta, vx, vy, omega, leg, leg_vel, time fraction

VALUE_EPOCHS = 5
VALUE_LR = 1e-3
VALUE_BATCH = 64
VALUE_GRAD_CLIP = 5000.0
LOG_STD_MIN = -2.5
LOG_STD_MAX = 0.5


def encode_states(states, ts, horizon: int) -> np.ndarray:
    """Scaled net inputs for a batch of raw states at step indices ts."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    if states.shape[1] != STATE_DIM or len(ts) != len(states):
        raise ValueError("states must be (n, 8) with one step index each")
    enc = np.empty((len(states), ENC_DIM))
    enc[:, 0] = states[:, 1]  # y
    enc[:, 1] = states[:, 2] / 3.0  # theta, a few radians per unit
    enc[:, 2] = states[:, 3] / 3.0  # vx
    enc[:, 3] = states[:, 4] / 3.0  # vy
    enc[:, 4] = states[:, 5] / 5.0  # omega
    enc[:, 5] = (states[:, 6] - 0.5) / 0.3  # leg, centered on its midpoint
    enc[:, 6] = states[:, 7] / 3.0  # leg_vel
    enc[:, 7] = ts / horizon
    return enc


def bounded_means(mean_net: DenseNet, observations):
    """Tanh-squashed mean-net outputs for encoded observations.

    Returns (means, forward caches, elementwise squash derivative); gradient
    paths chain the derivative onto any upstream that reaches the raw output.
    """
    raw, caches = nets.forward(mean_net, np.atleast_2d(observations))
    mu = np.tanh(raw)
    return mu, caches, 1.0 - mu * mu


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian over actions; samples are clamped to [-1, 1].

    log_std lives in [LOG_STD_MIN, LOG_STD_MAX]. Under a near-flat reward the
    trust region permits a slow exponential collapse of the noise scale (each
    step shrinks sigma a little at tiny KL cost); the floor keeps exploration
    alive and keeps likelihood ratios finite.

    The mean is the tanh-squashed net output, so it cannot leave the action
    box. An unbounded mean drifts outward for free under the same flat-reward
    regime (samples clamp, so behavior is unchanged), which leaves stored
    actions many sigmas from a later candidate's mean and overflows the
    likelihood ratios in the surrogate.
    """

    mean_net: DenseNet
    log_std: np.ndarray
    horizon: int

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.log_std.shape != (self.mean_net.output_dim,):
            raise ValueError("log_std must have one entry per action dimension")
        if not np.all(np.isfinite(self.log_std)):
            raise ValueError("log_std must be finite")
        self.log_std = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy(), self.horizon)

    def _mean(self, state, t: int) -> np.ndarray:
        enc = encode_states(state.to_array(), [t], self.horizon)
        mu, _, _ = bounded_means(self.mean_net, enc)
        return mu[0]

    def act(self, state, t: int, rng) -> EnvAction:
        if self.action_dim != ACTION_DIM:
            raise ValueError("act requires an environment-shaped action")
        mu = self._mean(state, t)
        a = np.clip(mu + np.exp(self.log_std) * rng.standard_normal(self.action_dim), -1.0, 1.0)
        return EnvAction(float(a[0]), float(a[1]))

    def act_greedy(self, state, t: int) -> EnvAction:
        if self.action_dim != ACTION_DIM:
            raise ValueError("act_greedy requires an environment-shaped action")
        a = np.clip(self._mean(state, t), -1.0, 1.0)
        return EnvAction(float(a[0]), float(a[1]))


def make_policy(horizon: int, seed: int, enc_dim: int = ENC_DIM, action_dim: int = ACTION_DIM) -> GaussianPolicy:
    net = nets.make_dense_net([enc_dim, 64, 64, action_dim], [RELU, RELU, IDENTITY], seed=seed * 7 + 1)
    return GaussianPolicy(net, np.full(action_dim, -0.5), horizon)


def make_value_net(seed: int, enc_dim: int = ENC_DIM) -> DenseNet:
    return nets.make_dense_net([enc_dim, 64, 64, 1], [RELU, RELU, IDENTITY], seed=seed * 7 + 2)


def policy_param_vector(policy: GaussianPolicy) -> np.ndarray:
    return np.concatenate([nets.flatten_params(policy.mean_net), policy.log_std])


def set_policy_param_vector(policy: GaussianPolicy, vec: np.ndarray) -> GaussianPolicy:
    n_mean = nets.param_count(policy.mean_net)
    if vec.shape != (n_mean + policy.action_dim,):
        raise ValueError("parameter vector has wrong length")
    return GaussianPolicy(
        nets.set_params(policy.mean_net, vec[:n_mean]), vec[n_mean:].copy(), policy.horizon
    )


def log_probs(policy: GaussianPolicy, observations, actions) -> np.ndarray:
    """Gaussian log densities of (clamped) actions under the policy."""
    obs = np.atleast_2d(observations)
    acts = np.atleast_2d(actions)
    mu, _, _ = bounded_means(policy.mean_net, obs)
    z = (acts - mu) / np.exp(policy.log_std)
    return (
        -0.5 * (z**2).sum(axis=1)
        - policy.log_std.sum()
        - 0.5 * policy.action_dim * math.log(2.0 * math.pi)
    )


@dataclass(frozen=True)
class TrpoConfig:
    kl_delta: float = 0.01
    gamma: float = 0.99
    gae_lambda: float = 0.97
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    steps_per_update: int = 2048

    def __post_init__(self):
        if self.kl_delta <= 0:
            raise ValueError("kl_delta must be positive")
        if not 0 < self.gamma <= 1 or not 0 < self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if self.cg_iters < 1 or self.max_backtracks < 1 or self.steps_per_update < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.cg_damping < 0:
            raise ValueError("cg_damping must be nonnegative")
        if not 0 < self.backtrack_ratio < 1:
            raise ValueError("backtrack_ratio must be in (0, 1)")


@dataclass
class RolloutBatch:
    observations: np.ndarray  # (N, enc_dim)
    actions: np.ndarray  # (N, action_dim)
    rewards: np.ndarray  # (N,)
    episode_lengths: list
    old_log_probs: np.ndarray  # (N,)
    advantages: np.ndarray  # (N,), normalized
    returns: np.ndarray  # (N,)
    mean_episode_reward: float = 0.0

    def __post_init__(self):
        n = len(self.rewards)
        arrays = (self.observations, self.actions, self.rewards, self.old_log_probs, self.advantages, self.returns)
        if any(len(a) != n for a in arrays):
            raise ValueError("batch arrays are length-inconsistent")
        if sum(self.episode_lengths) != n:
            raise ValueError("episode lengths do not cover the batch")
        if any(not np.all(np.isfinite(np.asarray(a, dtype=np.float64))) for a in arrays):
            raise ValueError("non-finite values in rollout batch")


def gae_advantages(rewards, values, episode_lengths, gamma: float, lam: float):
    """Generalized advantages and value-regression targets per episode.

    values carries one bootstrap entry after each episode (0 at terminal), so
    len(values) == len(rewards) + len(episode_lengths).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if sum(episode_lengths) != len(rewards):
        raise ValueError("episode lengths do not cover the rewards")
    if len(values) != len(rewards) + len(episode_lengths):
        raise ValueError("values needs one bootstrap entry per episode")
    advantages = np.empty_like(rewards)
    returns = np.empty_like(rewards)
    r_off = v_off = 0
    for length in episode_lengths:
        ep_r = rewards[r_off : r_off + length]
        ep_v = values[v_off : v_off + length + 1]
        acc = 0.0
        for t in reversed(range(length)):
            delta = ep_r[t] + gamma * ep_v[t + 1] - ep_v[t]
            acc = delta + gamma * lam * acc
            advantages[r_off + t] = acc
        returns[r_off : r_off + length] = advantages[r_off : r_off + length] + ep_v[:length]
        r_off += length
        v_off += length + 1
    return advantages, returns


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    centered = advantages - advantages.mean()
    return centered / (centered.std() + 1e-8)


def conjugate_gradient(apply_A, b, iters: int = 10, tol: float = 1e-10, collect_iterates: bool = False):
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = float(r @ r)
    history = []
    for _ in range(iters):
        if math.sqrt(rs) <= tol:
            break
        Ap = np.asarray(apply_A(p))
        if not np.all(np.isfinite(Ap)):
            raise ValueError("non-finite operator output in conjugate gradient")
        pAp = float(p @ Ap)
        if pAp <= 0 or not math.isfinite(pAp):
            raise ValueError("operator is not positive definite along the search direction")
        alpha = rs / pAp
        x = x + alpha * p
        if collect_iterates:
            history.append(x.copy())
        r = r - alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return (x, history) if collect_iterates else x


def mean_kl(policy_old: GaussianPolicy, policy_new: GaussianPolicy, observations) -> float:
    """Closed-form mean KL(old || new) over a batch of encoded observations."""
    obs = np.atleast_2d(observations)
    mu_o, _, _ = bounded_means(policy_old.mean_net, obs)
    mu_n, _, _ = bounded_means(policy_new.mean_net, obs)
    var_o = np.exp(2.0 * policy_old.log_std)
    var_n = np.exp(2.0 * policy_new.log_std)
    per_dim = (
        (policy_new.log_std - policy_old.log_std)
        + (var_o + (mu_o - mu_n) ** 2) / (2.0 * var_n)
        - 0.5
    )
    return float(per_dim.sum(axis=1).mean())


def fisher_vector_product(policy: GaussianPolicy, observations, v, damping: float) -> np.ndarray:
    """(H + damping*I) v for H the KL Hessian at new == old.

    For a diagonal Gaussian that Hessian is block-diagonal: the mean block is
    J^T diag(1/sigma^2) J averaged over observations (J the Jacobian of the
    squashed mean), and the log_std block is 2*I; the blocks are computed
    matrix-free with one forward-mode and one reverse-mode pass, chaining the
    squash derivative onto each.
    """
    v = np.asarray(v, dtype=np.float64)
    n_mean = nets.param_count(policy.mean_net)
    if v.shape != (n_mean + policy.action_dim,):
        raise ValueError("vector is not shape-congruent with policy parameters")
    obs = np.atleast_2d(observations)
    tangent = nets.unflatten_like(policy.mean_net, v[:n_mean])
    _, draw = nets.forward_jvp(policy.mean_net, obs, tangent)
    _, caches, dsquash = bounded_means(policy.mean_net, obs)
    dmu = dsquash * draw
    upstream = dsquash * dmu * np.exp(-2.0 * policy.log_std) / len(obs)
    grads = nets.backward(policy.mean_net, caches, upstream)
    hv = np.concatenate([nets.flatten_grads(grads), 2.0 * v[n_mean:]])
    return hv + damping * v


def surrogate(policy: GaussianPolicy, batch: RolloutBatch) -> float:
    """Importance-weighted advantage objective (what the update maximizes)."""
    ratio = np.exp(log_probs(policy, batch.observations, batch.actions) - batch.old_log_probs)
    return float((ratio * batch.advantages).mean())


def surrogate_gradient(policy: GaussianPolicy, batch: RolloutBatch) -> np.ndarray:
    """Gradient of the surrogate at the batch-generating parameters."""
    obs = batch.observations
    mu, caches, dsquash = bounded_means(policy.mean_net, obs)
    inv_var = np.exp(-2.0 * policy.log_std)
    z2 = ((batch.actions - mu) ** 2) * inv_var
    upstream = dsquash * batch.advantages[:, None] * (batch.actions - mu) * inv_var / len(obs)
    grads = nets.backward(policy.mean_net, caches, upstream)
    g_logstd = (batch.advantages[:, None] * (z2 - 1.0)).mean(axis=0)
    g = np.concatenate([nets.flatten_grads(grads), g_logstd])
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite surrogate gradient")
    return g


def _fit_value(value_net: DenseNet, observations, returns, epochs: int = VALUE_EPOCHS) -> DenseNet:
    """Warm-started SGD regression of the discounted returns.

    Squared-error gradients grow with the return scale, so batches from a
    strongly improved policy can push plain SGD past its stability point.
    Clipping the global gradient norm bounds every step; batches below the
    threshold (all of training at moderate return scales) are untouched.
    """
    cfg = SgdConfig(learning_rate=VALUE_LR, batch_size=VALUE_BATCH)
    n = len(returns)
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([0xFA1, epoch, n]))
        perm = rng.permutation(n)
        for lo in range(0, n, VALUE_BATCH):
            idx = perm[lo : lo + VALUE_BATCH]
            pred, caches = nets.forward(value_net, observations[idx])
            upstream = (pred - returns[idx, None]) / len(idx)
            grads = nets.backward(value_net, caches, upstream)
            gnorm = math.sqrt(
                sum(float(np.sum(dW * dW) + np.sum(db * db)) for dW, db in grads)
            )
            if gnorm > VALUE_GRAD_CLIP:
                scale = VALUE_GRAD_CLIP / gnorm
                grads = GradientSet([(dW * scale, db * scale) for dW, db in grads])
            value_net = nets.sgd_step(value_net, grads, cfg)
    return value_net


def value_predictions(value_net: DenseNet, observations) -> np.ndarray:
    out, _ = nets.forward(value_net, np.atleast_2d(observations))
    return out[:, 0]


def trpo_update(policy: GaussianPolicy, value_net: DenseNet, batch: RolloutBatch, config: TrpoConfig):
    """One natural-gradient policy step plus a value regression pass.

    The accepted candidate is the first backtracking step with measured
    KL <= kl_delta and positive surrogate improvement; if none qualifies the
    policy is returned unchanged.
    """
    g = surrogate_gradient(policy, batch)
    stats = {"kl": 0.0, "surrogate_improvement": 0.0, "backtracks": 0, "accepted": False}
    new_policy = policy
    if float(np.linalg.norm(g)) > 1e-12:
        def fvp(v):
            return fisher_vector_product(policy, batch.observations, v, config.cg_damping)

        x = conjugate_gradient(fvp, g, iters=config.cg_iters)
        xhx = float(x @ fvp(x))
        if xhx > 0 and math.isfinite(xhx):
            full_step = math.sqrt(2.0 * config.kl_delta / xhx) * x
            old_vec = policy_param_vector(policy)
            base = surrogate(policy, batch)
            for k in range(config.max_backtracks):
                candidate = set_policy_param_vector(
                    policy, old_vec + (config.backtrack_ratio**k) * full_step
                )
                kl = mean_kl(policy, candidate, batch.observations)
                improvement = surrogate(candidate, batch) - base
                if kl <= config.kl_delta and improvement > 0:
                    new_policy = candidate
                    stats.update(
                        kl=kl, surrogate_improvement=improvement, backtracks=k, accepted=True
                    )
                    break
            else:
                stats["backtracks"] = config.max_backtracks
    value_net = _fit_value(value_net, batch.observations, batch.returns)
    return new_policy, value_net, stats


def collect_rollouts(
    policy: GaussianPolicy,
    value_net: DenseNet,
    env_params: EnvParams,
    reward_fn,
    episode_length: int,
    config: TrpoConfig,
    seed: int,
):
    """Whole fixed-length episodes totaling >= steps_per_update steps.

    reward_fn maps a Trajectory to its per-step reward array, so rewards that
    need batched model evaluation stay cheap. Returns (batch, trajectories).
    """
    if policy.horizon != episode_length:
        raise ValueError("policy horizon must match the episode length")
    n_episodes = math.ceil(config.steps_per_update / episode_length)
    ts = np.arange(episode_length)
    trajectories = []
    obs_parts, act_parts, reward_parts, value_parts = [], [], [], []
    for e in range(n_episodes):
        traj, _ = rollout(policy, env_params, None, episode_length, seed=seed * 8191 + e)
        rewards = np.asarray(reward_fn(traj), dtype=np.float64)
        if rewards.shape != (episode_length,):
            raise ValueError("reward_fn must return one reward per step")
        enc = encode_states(traj.states_array(), ts, policy.horizon)
        values = np.append(value_predictions(value_net, enc), 0.0)  # terminal bootstrap
        trajectories.append(traj)
        obs_parts.append(enc)
        act_parts.append(traj.actions_array())
        reward_parts.append(rewards)
        value_parts.append(values)
    observations = np.concatenate(obs_parts)
    actions = np.concatenate(act_parts)
    rewards = np.concatenate(reward_parts)
    episode_lengths = [episode_length] * n_episodes
    advantages, returns = gae_advantages(
        rewards, np.concatenate(value_parts), episode_lengths, config.gamma, config.gae_lambda
    )
    batch = RolloutBatch(
        observations=observations,
        actions=actions,
        rewards=rewards,
        episode_lengths=episode_lengths,
        old_log_probs=log_probs(policy, observations, actions),
        advantages=normalize_advantages(advantages),
        returns=returns,
        mean_episode_reward=float(rewards.sum() / n_episodes),
    )
    return batch, trajectories


def save_policy(policy: GaussianPolicy, dir_path: str) -> None:
    os.makedirs(dir_path, exist_ok=True)
    nets.save_net(policy.mean_net, os.path.join(dir_path, "mean.vnn"))
    meta = {"log_std": [float(v) for v in policy.log_std], "horizon": policy.horizon}
    tmp = os.path.join(dir_path, "meta.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, sort_keys=True)
    os.replace(tmp, os.path.join(dir_path, "meta.json"))


def load_policy(dir_path: str) -> GaussianPolicy:
    meta_path = os.path.join(dir_path, "meta.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"missing policy metadata: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    return GaussianPolicy(
        nets.load_net(os.path.join(dir_path, "mean.vnn")),
        np.asarray(meta["log_std"], dtype=np.float64),
        int(meta["horizon"]),
    )
