"""Planar one-legged hopper: deterministic 2D rigid-body simulation.

The torso is a single rigid body carrying a massless prismatic leg mounted
through its center of mass. The only ground interaction is a penalty
spring-damper at the foot point; leg thrust transmits to the torso only
while the foot is in contact. Control is (torque, thrust), both in [-1, 1].

All functions here are pure and operate on value types, so they are safe
to call from any number of workers; RNG state is caller-owned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STATE_FIELDS = ("x", "y", "theta", "vx", "vy", "omega", "leg", "leg_vel")
STATE_DIM = len(STATE_FIELDS)
ACTION_DIM = 2

# Leg-actuator internals. The extension coordinate gets second-order
# dynamics that are stable under semi-implicit Euler at dt = 1/30.
_LEG_MASS = 0.1
_LEG_SPRING = 60.0
_LEG_DAMPING = 3.0
_FRICTION_COEFF = 1.0  # Coulomb cap on the viscous tangential ground force
_PENETRATION_CAP = 0.15  # saturates spring force so single-step impulses stay bounded
_SCRAPE_DAMPING = 0.3  # spin bleed while the torso itself drags on the ground
_ANKLE_DAMPING = 0.6  # pivot friction at the planted foot; resists wobble, not flight
_RESET_JITTER = 0.005


@dataclass(frozen=True)
class EnvState:
    """Physical state. theta is unwrapped: backward rotation decreases it."""

    x: float
    y: float
    theta: float
    vx: float
    vy: float
    omega: float
    leg: float
    leg_vel: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.theta, self.vx, self.vy, self.omega, self.leg, self.leg_vel],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "EnvState":
        vals = [float(v) for v in arr]
        if len(vals) != STATE_DIM:
            raise ValueError(f"state array must have {STATE_DIM} entries, got {len(vals)}")
        return cls(*vals)

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (self.x, self.y, self.theta, self.vx, self.vy, self.omega, self.leg, self.leg_vel)
        )


@dataclass(frozen=True)
class EnvAction:
    """Actuator command; both components are clamped to [-1, 1] before use."""

    torque: float
    thrust: float

    def clamped(self) -> "EnvAction":
        return EnvAction(
            torque=min(1.0, max(-1.0, self.torque)),
            thrust=min(1.0, max(-1.0, self.thrust)),
        )

    def to_array(self) -> np.ndarray:
        return np.array([self.torque, self.thrust], dtype=np.float64)


@dataclass(frozen=True)
class EnvParams:
    dt: float = 1.0 / 30.0
    g: float = 9.81
    mass: float = 1.0
    inertia: float = 0.1
    leg_min: float = 0.2
    leg_max: float = 0.8
    torque_max: float = 2.0
    thrust_max: float = 25.0
    ground_stiffness: float = 110.0
    ground_damping: float = 3.0
    y_alive_max: float = 3.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("mass", "inertia", "ground_stiffness", "ground_damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Trajectory:
    """Episode record: steps[t] = (state before action t, clamped action t)."""

    steps: list = field(default_factory=list)
    seed: int = 0
    final_state: EnvState | None = None

    @property
    def length(self) -> int:
        return len(self.steps)

    def states_array(self) -> np.ndarray:
        return np.stack([s.to_array() for s, _ in self.steps]) if self.steps else np.zeros((0, STATE_DIM))

    def actions_array(self) -> np.ndarray:
        return np.stack([a.to_array() for _, a in self.steps]) if self.steps else np.zeros((0, ACTION_DIM))


def _foot_kinematics(s: EnvState):
    st, ct = math.sin(s.theta), math.cos(s.theta)
    fx = s.x + s.leg * st
    fy = s.y - s.leg * ct
    fvx = s.vx + s.leg_vel * st + s.leg * ct * s.omega
    fvy = s.vy - s.leg_vel * ct + s.leg * st * s.omega
    return fx, fy, fvx, fvy, st, ct


def _normal_force(penetration: float, approach_vel: float, params: EnvParams) -> float:
    depth = min(penetration, _PENETRATION_CAP)
    n = params.ground_stiffness * depth - params.ground_damping * approach_vel
    return max(0.0, n)


def _capped_friction(tangential_vel: float, normal: float, params: EnvParams) -> float:
    friction = -params.ground_damping * tangential_vel
    cap = _FRICTION_COEFF * normal
    return min(cap, max(-cap, friction))


def step(state: EnvState, action: EnvAction, params: EnvParams) -> EnvState:
    """Advance one control step (semi-implicit Euler at params.dt)."""
    if not state.is_finite():
        raise ValueError("non-finite state passed to step")
    act = action.clamped()
    dt = params.dt

    _, fy, fvx, fvy, st, ct = _foot_kinematics(state)

    fx_total = 0.0
    fy_total = -params.mass * params.g
    torque = act.torque * params.torque_max

    if fy < 0.0:
        normal = _normal_force(-fy, fvy, params)
        friction = _capped_friction(fvx, normal, params)
        # contact force acts at the foot, offset r = leg * (sin, -cos)
        rx, ry = state.leg * st, -state.leg * ct
        torque += rx * normal - ry * friction
        torque += -_ANKLE_DAMPING * state.omega
        fx_total += friction
        fy_total += normal
        # thrust pushes the torso away from the foot, through the COM
        thrust = act.thrust * params.thrust_max
        fx_total += -thrust * st
        fy_total += thrust * ct

    if state.y < 0.0:
        # world floor under the torso point itself: without it a tipped body
        # would tunnel to -inf; scraping on it bleeds spin
        normal = _normal_force(-state.y, state.vy, params)
        fy_total += normal
        fx_total += _capped_friction(state.vx, normal, params)
        torque += -_SCRAPE_DAMPING * state.omega

    vx = state.vx + (fx_total / params.mass) * dt
    vy = state.vy + (fy_total / params.mass) * dt
    omega = state.omega + (torque / params.inertia) * dt

    x = state.x + vx * dt
    y = state.y + vy * dt
    theta = state.theta + omega * dt

    leg_mid = 0.5 * (params.leg_min + params.leg_max)
    leg_force = act.thrust * params.thrust_max - _LEG_SPRING * (state.leg - leg_mid) - _LEG_DAMPING * state.leg_vel
    leg_vel = state.leg_vel + (leg_force / _LEG_MASS) * dt
    leg = state.leg + leg_vel * dt
    if leg < params.leg_min:
        leg, leg_vel = params.leg_min, 0.0
    elif leg > params.leg_max:
        leg, leg_vel = params.leg_max, 0.0

    return EnvState(x, y, theta, vx, vy, omega, leg, leg_vel)


def nominal_stand(params: EnvParams) -> EnvState:
    """Rest state: mid-extension leg, foot penetration balancing gravity."""
    leg = 0.5 * (params.leg_min + params.leg_max)
    penetration = params.mass * params.g / params.ground_stiffness
    return EnvState(x=0.0, y=leg - penetration, theta=0.0, vx=0.0, vy=0.0, omega=0.0, leg=leg, leg_vel=0.0)


def reset(seed: int, params: EnvParams | None = None) -> EnvState:
    """Standing start with a seeded uniform perturbation of ±0.005 per field."""
    params = params or EnvParams()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFF, 0x5EED]))
    jitter = rng.uniform(-_RESET_JITTER, _RESET_JITTER, size=STATE_DIM)
    return EnvState.from_array(nominal_stand(params).to_array() + jitter)


def is_alive(state: EnvState, params: EnvParams) -> bool:
    return 0.0 <= state.y <= params.y_alive_max


def backflip_reward(state: EnvState, action: EnvAction, params: EnvParams | None = None) -> float:
    """Hand-coded per-step reward: backward spin plus alive bonus minus control cost."""
    params = params or EnvParams()
    spin = min(10.0, max(-10.0, -state.omega))
    alive = 1.0 if is_alive(state, params) else 0.0
    return spin + alive - 0.05 * (action.torque**2 + action.thrust**2)


def hop_reward(state: EnvState, action: EnvAction, params: EnvParams | None = None) -> float:
    """Hand-coded per-step reward: forward velocity plus alive bonus minus control cost."""
    params = params or EnvParams()
    alive = 1.0 if is_alive(state, params) else 0.0
    return state.vx + alive - 0.05 * (action.torque**2 + action.thrust**2)


def count_backflips(traj: Trajectory) -> int:
    """Completed backward rotations: floor(max(0, theta_first - theta_last) / 2pi)."""
    if traj.length == 0:
        raise ValueError("cannot count backflips of an empty trajectory")
    theta_first = traj.steps[0][0].theta
    theta_last = (traj.final_state or traj.steps[-1][0]).theta
    return int(math.floor(max(0.0, theta_first - theta_last) / (2.0 * math.pi)))


RANDOM_ACTION_AMP = 0.45


class RandomPolicy:
    """Uniform actions in [-amp, amp]^2; the pretraining-stage agent.

    The amplitude is deliberately below full authority: it keeps random
    rollouts upright long enough that rated clips span several similarity
    classes instead of collapsing onto rating 1.
    """

    def __init__(self, amp: float = RANDOM_ACTION_AMP):
        self.amp = amp

    def act(self, state: EnvState, t: int, rng: np.random.Generator) -> EnvAction:
        u = rng.uniform(-self.amp, self.amp, size=2)
        return EnvAction(float(u[0]), float(u[1]))

    def act_greedy(self, state: EnvState, t: int) -> EnvAction:
        return EnvAction(0.0, 0.0)


def rollout(policy, env_params: EnvParams, reward_fn, n_steps: int, seed: int, greedy: bool = False):
    """Run one fixed-length episode.

    policy must expose act(state, t, rng) and act_greedy(state, t). Returns
    (Trajectory, rewards) where rewards[t] = reward_fn(s_t, a_t) on the
    clamped action (all zeros when reward_fn is None, e.g. when rewards are
    computed in batch afterwards). Deterministic given (policy parameters,
    seed).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFF, 0xAC7]))
    state = reset(seed, env_params)
    traj = Trajectory(seed=seed)
    rewards = []
    for t in range(n_steps):
        action = policy.act_greedy(state, t) if greedy else policy.act(state, t, rng)
        action = action.clamped()
        traj.steps.append((state, action))
        rewards.append(float(reward_fn(state, action)) if reward_fn is not None else 0.0)
        state = step(state, action, env_params)
    traj.final_state = state
    return traj, rewards
