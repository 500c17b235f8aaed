"""
Discrete-time plants with tokenized actions.

Three plants are provided:
  SMSM   frictionless point mass on a rail, state (position, velocity), one force
  TLMDCP cart carrying a three-link inverted pendulum, state
         (s, s', ϑ1, ϑ1', ϑ2, ϑ2', ϑ3, ϑ3'), one horizontal force on the cart
  PAC    rotor-craft attitude, state (ϑ1, ϑ2, ϑ3, ϑ1', ϑ2', ϑ3'), four rotor thrusts

Every plant advances by semi-implicit Euler (velocities first, then positions)
with a fixed dt. Continuous actions live on a per-dimension grid of evenly
spaced levels; a token is the mixed-radix index of a grid point with
dimension 0 least significant. Scripted controllers (PD for SMSM and PAC, LQR
about the upright linearization for TLMDCP) produce the expert sequences.
"""
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_discrete_are

from mtgan import generator
from mtgan.errors import ConfigError, DivergenceError, InputError, ShapeError, SolverError

log = logging.getLogger(__name__)

GRAVITY = 9.81
DEFAULT_DT = 0.02
DEFAULT_HORIZON = 150
# longest expert recording used for training, per plant
TRAJECTORY_CAPS = {"SMSM": 80, "TLMDCP": DEFAULT_HORIZON, "PAC": 50}
DIVERGENCE_LIMIT = 1e6
LINEARIZE_EPS = 1e-6

# relative spread of physical parameters across a task family
VARIATION = 0.2


class PlantKind(str, Enum):
    SMSM = "SMSM"
    TLMDCP = "TLMDCP"
    PAC = "PAC"


def _symmetric_levels(n: int) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, n)
    # exact antisymmetry puts the middle level of an odd grid at exactly 0
    return (lin - lin[::-1]) / 2.0


@dataclass(frozen=True)
class ActionGrid:
    """
    center: per-dimension grid center (the plant's trim action)
    half: per-dimension half width of the actuation range
    levels: per-dimension number of evenly spaced levels
    """
    center: Tuple[float, ...]
    half: Tuple[float, ...]
    levels: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "half", tuple(float(v) for v in self.half))
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if not (len(self.center) == len(self.half) == len(self.levels) >= 1):
            raise ShapeError("action grid needs matching center, half and levels per dimension")
        if min(self.levels) < 1 or min(self.half) < 0:
            raise InputError("action grid needs >= 1 level and a non-negative range per dimension")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def vocab(self) -> int:
        return int(np.prod(self.levels))

    @property
    def low(self) -> np.ndarray:
        return np.array(self.center) - np.array(self.half)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.center) + np.array(self.half)

    def values(self, d: int) -> np.ndarray:
        return self.center[d] + self.half[d] * _symmetric_levels(self.levels[d])

    def decode(self, token: int) -> np.ndarray:
        token = int(token)
        if not 0 <= token < self.vocab:
            raise InputError(f"token {token} outside vocabulary of {self.vocab}")
        out = np.empty(self.dim)
        for d, n in enumerate(self.levels):
            token, idx = divmod(token, n)
            out[d] = self.values(d)[idx]
        return out

    def encode(self, indices: Sequence[int]) -> int:
        token = 0
        radix = 1
        for idx, n in zip(indices, self.levels):
            if not 0 <= idx < n:
                raise InputError(f"grid index {idx} outside {n} levels")
            token += int(idx) * radix
            radix *= n
        return token

    def snap(self, action) -> int:
        """Nearest grid point to a continuous action, clipped to the range."""
        action = np.broadcast_to(np.asarray(action, dtype=np.float64), (self.dim,))
        indices = [int(np.argmin(np.abs(self.values(d) - a))) for d, a in enumerate(action)]
        return self.encode(indices)


@dataclass(frozen=True)
class RewardWeights:
    c_state: float = 1.0
    c_action: float = 0.1

    def __post_init__(self):
        if not (self.c_state > 0 and self.c_action > 0):
            raise InputError("reward weights must be > 0")


_NOMINAL: Dict[PlantKind, Dict[str, float]] = {
    PlantKind.SMSM: {"mass": 1.0},
    PlantKind.TLMDCP: {
        "cart_mass": 1.0,
        "m1": 0.1, "m2": 0.1, "m3": 0.1,
        "l1": 0.5, "l2": 0.5, "l3": 0.5,
    },
    PlantKind.PAC: {
        "mass": 0.5, "arm": 0.17,
        "ixx": 0.0023, "iyy": 0.0023, "izz": 0.004,
        "yaw_coef": 0.016,
    },
}

_START = {
    PlantKind.SMSM: (1.0, 0.0),
    PlantKind.TLMDCP: (0.0, 0.0, 0.05, 0.0, -0.03, 0.0, 0.02, 0.0),
    PlantKind.PAC: (0.1, -0.1, 0.05, 0.0, 0.0, 0.0),
}

_SPREAD = {
    PlantKind.SMSM: (0.2, 0.1),
    PlantKind.TLMDCP: (0.05, 0.0, 0.02, 0.0, 0.02, 0.0, 0.02, 0.0),
    PlantKind.PAC: (0.05, 0.05, 0.05, 0.0, 0.0, 0.0),
}

_ANGLES = {
    PlantKind.SMSM: (),
    PlantKind.TLMDCP: (2, 4, 6),
    PlantKind.PAC: (0, 1, 2),
}


def nominal_params(kind) -> Dict[str, float]:
    return dict(_NOMINAL[PlantKind(kind)])


def action_grid(kind, params: Dict[str, float]) -> ActionGrid:
    kind = PlantKind(kind)
    if kind is PlantKind.SMSM:
        return ActionGrid((0.0,), (1.0,), (5,))
    if kind is PlantKind.TLMDCP:
        return ActionGrid((0.0,), (10.0,), (7,))
    hover = params["mass"] * GRAVITY / 4.0
    return ActionGrid((hover,) * 4, (0.2 * hover,) * 4, (3,) * 4)


@dataclass(frozen=True, eq=False)
class PlantSpec:
    """
    kind: which plant
    params: physical parameters, all > 0
    grid: action grid defining the token vocabulary
    goal: goal state
    start: nominal initial state
    spread: half width of the uniform spread around start for sampled episodes
    dt: integration step in seconds
    horizon: episode length in steps
    weights: reward penalty factors
    task_id: position in its task family
    """
    kind: PlantKind
    params: Dict[str, float]
    grid: ActionGrid
    goal: Tuple[float, ...]
    start: Tuple[float, ...]
    spread: Tuple[float, ...]
    dt: float = DEFAULT_DT
    horizon: int = DEFAULT_HORIZON
    weights: RewardWeights = field(default_factory=RewardWeights)
    task_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PlantKind(self.kind))
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})
        for name in ("goal", "start", "spread"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.dt > 0:
            raise InputError("dt must be > 0")
        if int(self.horizon) < 1:
            raise InputError("horizon must be >= 1")
        missing = set(_NOMINAL[self.kind]) - set(self.params)
        if missing:
            raise InputError(f"{self.kind.value} spec lacks parameters {sorted(missing)}")
        if min(self.params.values()) <= 0:
            raise InputError("physical parameters must be > 0")
        n = len(_START[self.kind])
        if not (len(self.goal) == len(self.start) == len(self.spread) == n):
            raise ShapeError(f"{self.kind.value} states have {n} components")

    @classmethod
    def build(cls, kind, params: Optional[Dict[str, float]] = None, **kwargs) -> "PlantSpec":
        kind = PlantKind(kind)
        params = nominal_params(kind) if params is None else dict(params)
        n = len(_START[kind])
        kwargs.setdefault("goal", (0.0,) * n)
        kwargs.setdefault("start", _START[kind])
        kwargs.setdefault("spread", _SPREAD[kind])
        return cls(kind, params, action_grid(kind, params), **kwargs)

    @property
    def vocab(self) -> int:
        return self.grid.vocab

    @property
    def state_dim(self) -> int:
        return len(self.goal)

    @property
    def action_dim(self) -> int:
        return self.grid.dim

    @property
    def trim(self) -> np.ndarray:
        """Action holding the plant at rest at its goal."""
        return np.array(self.grid.center)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "params": dict(self.params),
            "goal": list(self.goal),
            "start": list(self.start),
            "spread": list(self.spread),
            "dt": self.dt,
            "horizon": int(self.horizon),
            "weights": {"c_state": self.weights.c_state, "c_action": self.weights.c_action},
            "task_id": self.task_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlantSpec":
        data = dict(data)
        weights = RewardWeights(**data.pop("weights", {}))
        return cls.build(data.pop("kind"), data.pop("params"), weights=weights, **data)


def make_task_family(kind, n_tasks: int, rng) -> List[PlantSpec]:
    """n_tasks specs whose physical parameters are drawn uniformly within ±20% of nominal."""
    if n_tasks < 1:
        raise InputError("a task family needs n_tasks >= 1")
    kind = PlantKind(kind)
    nominal = nominal_params(kind)
    family = []
    for t in range(n_tasks):
        params = {k: v * rng.uniform(1.0 - VARIATION, 1.0 + VARIATION) for k, v in nominal.items()}
        family.append(PlantSpec.build(kind, params, task_id=t))
    return family


def wrap_angle(a):
    """Maps angles onto (-π, π]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def _wrap_state(spec: PlantSpec, state: np.ndarray) -> np.ndarray:
    idx = list(_ANGLES[spec.kind])
    if idx:
        state[idx] = wrap_angle(state[idx])
    return state


def detokenize(spec: PlantSpec, token: int) -> np.ndarray:
    return spec.grid.decode(token)


def tokenize(spec: PlantSpec, action) -> int:
    return spec.grid.snap(action)


def equilibrium_token(spec: PlantSpec) -> int:
    return spec.grid.snap(spec.trim)


def initial_state(spec: PlantSpec, rng=None) -> np.ndarray:
    start = np.array(spec.start)
    if rng is None:
        return start
    spread = np.array(spec.spread)
    return start + rng.uniform(-1.0, 1.0, start.shape) * spread


def _smsm_accel(p, state, u):
    return np.array([u[0] / p["mass"]])


def _tlmdcp_accel(p, state, u):
    q = state[0::2]
    qd = state[1::2]
    phi = q[1:]
    dphi = qd[1:]
    m = np.array([p["m1"], p["m2"], p["m3"]])
    l = np.array([p["l1"], p["l2"], p["l3"]])
    # mass carried at or beyond each joint
    mu = np.cumsum(m[::-1])[::-1]
    mu_pair = mu[np.maximum.outer(np.arange(3), np.arange(3))]

    M = np.empty((4, 4))
    M[0, 0] = p["cart_mass"] + m.sum()
    M[0, 1:] = M[1:, 0] = mu * l * np.cos(phi)
    diff = phi[:, None] - phi[None, :]
    M[1:, 1:] = mu_pair * np.outer(l, l) * np.cos(diff)

    rhs = np.empty(4)
    rhs[0] = u[0] + np.sum(mu * l * np.sin(phi) * dphi ** 2)
    rhs[1:] = -(mu_pair * np.outer(l, l) * np.sin(diff)) @ dphi ** 2 + GRAVITY * mu * l * np.sin(phi)
    return np.linalg.solve(M, rhs)


def _pac_mixing(p) -> np.ndarray:
    # rows: total thrust, roll torque, pitch torque, yaw torque (plus frame)
    a, k = p["arm"], p["yaw_coef"]
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [0.0, a, 0.0, -a],
        [-a, 0.0, a, 0.0],
        [k, -k, k, -k],
    ])


def _pac_accel(p, state, u):
    w = state[3:]
    inertia = np.array([p["ixx"], p["iyy"], p["izz"]])
    tau = (_pac_mixing(p) @ u)[1:]
    return (tau - np.cross(w, inertia * w)) / inertia


def _pac_rates(angles, w):
    """Euler-angle rates from body rates (roll, pitch, yaw)."""
    phi, theta = angles[0], angles[1]
    sp, cp = np.sin(phi), np.cos(phi)
    ct, tt = np.cos(theta), np.tan(theta)
    return np.array([
        w[0] + sp * tt * w[1] + cp * tt * w[2],
        cp * w[1] - sp * w[2],
        (sp * w[1] + cp * w[2]) / ct,
    ])


def _advance(spec: PlantSpec, state, action) -> np.ndarray:
    """One semi-implicit Euler step without angle wrapping."""
    state = np.asarray(state, dtype=np.float64)
    p, dt = spec.params, spec.dt
    out = state.copy()
    if spec.kind is PlantKind.PAC:
        w = state[3:] + dt * _pac_accel(p, state, action)
        out[3:] = w
        out[:3] = state[:3] + dt * _pac_rates(state[:3], w)
        return out
    accel = _smsm_accel(p, state, action) if spec.kind is PlantKind.SMSM else _tlmdcp_accel(p, state, action)
    out[1::2] = state[1::2] + dt * accel
    out[0::2] = state[0::2] + dt * out[1::2]
    return out


def reward(spec: PlantSpec, state, action, weights: Optional[RewardWeights] = None) -> float:
    """-c_state·‖state - goal‖² - c_action·‖action - trim‖²; never positive."""
    weights = weights or spec.weights
    dx = np.asarray(state, dtype=np.float64) - np.array(spec.goal)
    du = np.asarray(action, dtype=np.float64) - spec.trim
    return float(-weights.c_state * (dx @ dx) - weights.c_action * (du @ du))


def step(spec: PlantSpec, state, token: int) -> Tuple[np.ndarray, float]:
    """Advances the plant by dt under the action of `token`; deterministic."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (spec.state_dim,):
        raise ShapeError(f"{spec.kind.value} state must have {spec.state_dim} components, got {state.shape}")
    if not np.all(np.isfinite(state)):
        raise InputError("plant state must be finite")
    action = detokenize(spec, token)
    nxt = _wrap_state(spec, _advance(spec, state, action))
    if not np.all(np.isfinite(nxt)) or np.linalg.norm(nxt) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{spec.kind.value} task {spec.task_id} state left the admissible region")
    return nxt, reward(spec, nxt, action)


def linearize(spec: PlantSpec, state=None, action=None, eps: float = LINEARIZE_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central finite-difference Jacobians (A, B) of the one-step map at (state,
    action). state defaults to the goal, action to the plant's trim, which is
    zero for SMSM and TLMDCP.
    """
    x0 = np.array(spec.goal if state is None else state, dtype=np.float64)
    u0 = spec.trim if action is None else np.asarray(action, dtype=np.float64)
    n, m = x0.size, u0.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        A[:, j] = (_advance(spec, x0 + e, u0) - _advance(spec, x0 - e, u0)) / (2 * eps)
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        B[:, j] = (_advance(spec, x0, u0 + e) - _advance(spec, x0, u0 - e)) / (2 * eps)
    return A, B


class PDController:
    """
    Proportional-derivative expert for SMSM and PAC.
    kp, kd: gains on the goal error and its rate
    """

    def __init__(self, spec: PlantSpec, kp: Optional[float] = None, kd: Optional[float] = None):
        if spec.kind is PlantKind.TLMDCP:
            raise InputError("TLMDCP uses the LQR expert")
        self.kind = spec.kind
        self.spec = spec
        if spec.kind is PlantKind.SMSM:
            self.kp = 6.0 if kp is None else kp
            self.kd = 4.0 if kd is None else kd
        else:
            self.kp = 16.0 if kp is None else kp
            self.kd = 6.0 if kd is None else kd
            self._unmix = np.linalg.inv(_pac_mixing(spec.params))

    def __call__(self, state) -> np.ndarray:
        err = np.asarray(state, dtype=np.float64) - np.array(self.spec.goal)
        if self.kind is PlantKind.SMSM:
            return np.array([-self.kp * err[0] - self.kd * err[1]])
        p = self.spec.params
        inertia = np.array([p["ixx"], p["iyy"], p["izz"]])
        tau = inertia * (-self.kp * err[:3] - self.kd * err[3:])
        return self._unmix @ np.concatenate(([p["mass"] * GRAVITY], tau))


class LQRController:
    """
    Discrete LQR about the TLMDCP upright equilibrium.
    K: state feedback gain, u = trim - K·(state - goal)
    """

    def __init__(self, spec: PlantSpec, q_weight: float = 1.0, r_weight: float = 0.1):
        if spec.kind is not PlantKind.TLMDCP:
            raise InputError("the LQR expert drives TLMDCP only")
        self.kind = spec.kind
        self.spec = spec
        A, B = linearize(spec)
        Q = q_weight * np.eye(A.shape[0])
        R = r_weight * np.eye(B.shape[1])
        try:
            P = solve_discrete_are(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError) as err:
            raise SolverError(f"Riccati solve failed for task {spec.task_id}: {err}") from err
        self.K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)

    def __call__(self, state) -> np.ndarray:
        err = np.asarray(state, dtype=np.float64) - np.array(self.spec.goal)
        return self.spec.trim - self.K @ err


def make_expert(spec: PlantSpec) -> Callable:
    if spec.kind is PlantKind.TLMDCP:
        return LQRController(spec)
    return PDController(spec)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    states: visited states, row 0 is the initial state ((T+1) x n)
    actions: applied continuous actions (T x m)
    tokens: applied tokens
    rewards: per-step rewards
    """
    states: np.ndarray
    actions: np.ndarray
    tokens: Tuple[int, ...]
    rewards: np.ndarray

    def __len__(self):
        return len(self.tokens)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def simulate(spec: PlantSpec, tokens: Sequence[int], state0=None) -> Trajectory:
    """Open-loop replay of a token sequence from state0 (default: the nominal start)."""
    state = initial_state(spec) if state0 is None else np.asarray(state0, dtype=np.float64)
    states, actions, rewards = [state], [], []
    for t, tok in enumerate(tokens):
        try:
            state, r = step(spec, state, tok)
        except DivergenceError as err:
            err.step = t
            raise
        states.append(state)
        actions.append(detokenize(spec, tok))
        rewards.append(r)
    return Trajectory(np.array(states), np.array(actions).reshape(len(actions), spec.action_dim),
                      tuple(int(t) for t in tokens), np.array(rewards))


def closed_loop(spec: PlantSpec, policy: Callable[[np.ndarray], int], horizon: int, state0) -> Trajectory:
    """Runs a state-feedback token policy for horizon steps."""
    state = np.asarray(state0, dtype=np.float64)
    tokens = []
    states, rewards = [state], []
    for t in range(horizon):
        tok = int(policy(state))
        try:
            state, r = step(spec, state, tok)
        except DivergenceError as err:
            err.step = t
            raise
        tokens.append(tok)
        states.append(state)
        rewards.append(r)
    actions = np.array([detokenize(spec, t) for t in tokens]).reshape(len(tokens), spec.action_dim)
    return Trajectory(np.array(states), actions, tuple(tokens), np.array(rewards))


def expert_rollout(spec: PlantSpec, controller=None, horizon: Optional[int] = None, rng=None,
                   state0=None) -> generator.TokenSequence:
    """
    Runs the scripted controller, snapping each command to the nearest grid
    token, and returns the tokens with their rewards as an expert sequence.
    The start state is state0, or the nominal start spread by rng.
    """
    controller = controller if controller is not None else make_expert(spec)
    if getattr(controller, "kind", spec.kind) is not spec.kind:
        raise InputError(f"{controller.kind.value} controller cannot drive a {spec.kind.value} plant")
    horizon = spec.horizon if horizon is None else horizon
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    state0 = initial_state(spec, rng) if state0 is None else state0
    try:
        traj = closed_loop(spec, lambda s: spec.grid.snap(controller(s)), horizon, state0)
    except DivergenceError as err:
        raise DivergenceError(f"expert diverged on {spec.kind.value} task {spec.task_id}", step=err.step) from err
    return generator.TokenSequence(traj.tokens, rewards=traj.rewards, source=generator.EXPERT)


def write_trajectory_csv(path, spec: PlantSpec, traj: Trajectory):
    """One row per step: step, token, action components, state after the step, reward."""
    header = (["step", "token"] + [f"a{i}" for i in range(spec.action_dim)]
              + [f"s{i}" for i in range(spec.state_dim)] + ["reward"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, tok in enumerate(traj.tokens):
            writer.writerow([t, tok] + [f"{v:.9g}" for v in traj.actions[t]]
                            + [f"{v:.9g}" for v in traj.states[t + 1]] + [f"{traj.rewards[t]:.9g}"])


@dataclass(frozen=True)
class FamilySpec:
    """
    kind: plant of every task in the family
    n_tasks: family size
    seed: seed of the parameter variations
    """
    kind: str = PlantKind.SMSM.value
    n_tasks: int = 1
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PlantKind(self.kind).value)
        except ValueError as err:
            raise ConfigError(f"unknown plant kind {self.kind!r}", field="environments.kind") from err
        for name, low in (("n_tasks", 1), ("seed", 0)):
            value = getattr(self, name)
            if not isinstance(value, int) or value < low:
                raise ConfigError(f"{name} must be an integer >= {low}", field=f"environments.{name}")

    def build(self) -> List[PlantSpec]:
        return make_task_family(self.kind, self.n_tasks, np.random.default_rng(self.seed))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_tasks": self.n_tasks, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "FamilySpec":
        if not isinstance(data, dict):
            raise ConfigError("environments must be an object", field="environments")
        unknown = set(data) - {"kind", "n_tasks", "seed"}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown environments key {key!r}", field=f"environments.{key}")
        return cls(**data)
