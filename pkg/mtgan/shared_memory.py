"""
Shared memory across tasks: a basis L over the generator's shared-core
parameters plus one sparse code s per task.

Each task t contributes a parameter estimate θ_t and diagonal curvature
weights Z_t. The stored knowledge minimizes

    (1/T) Σ_t [ ‖θ_t - L s_t‖²_{Z_t} + μ ‖s_t‖₁ ] + λ ‖L‖²_F

by alternating exact block updates: codes by cyclic coordinate descent with
soft-thresholding, the basis row by row through k x k ridge systems (Z_t is
diagonal, so rows decouple). Neither block update can raise the objective.
"""
import logging
import threading
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mtgan import discriminator, generator
from mtgan.errors import ConfigError, InputError, NumericError, ShapeError, SolverError

log = logging.getLogger(__name__)

# column norms above this mean the ridge weight is too small for the data
COLUMN_NORM_LIMIT = 1e3


@dataclass(frozen=True)
class LifelongConfig:
    """
    mu_sparse: L1 weight on task codes
    lambda_ridge: Frobenius weight on the basis
    k_latent: number of basis columns
    tol: per-coordinate change that stops coordinate descent
    max_sweeps: coordinate descent sweep cap
    sweeps: alternating code/basis rounds run per added task
    probe_iterations: adversarial iterations of the probe run before transfer
    stats_samples: sampled sequences behind each curvature estimate
    """
    mu_sparse: float = 0.1
    lambda_ridge: float = 0.01
    k_latent: int = 4
    tol: float = 1e-8
    max_sweeps: int = 10000
    sweeps: int = 5
    probe_iterations: int = 5
    stats_samples: int = 64

    def __post_init__(self):
        if not self.mu_sparse >= 0:
            raise ConfigError("mu_sparse must be >= 0", field="mu_sparse")
        if not self.lambda_ridge >= 0:
            raise ConfigError("lambda_ridge must be >= 0", field="lambda_ridge")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0", field="tol")
        for name in ("k_latent", "max_sweeps", "sweeps", "stats_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if int(self.probe_iterations) < 0:
            raise ConfigError("probe_iterations must be >= 0", field="probe_iterations")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LifelongConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown lifelong key {key!r}", field=f"lifelong.{key}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"malformed lifelong value: {err}") from err


@dataclass(frozen=True, eq=False)
class SharedBasis:
    """L: d_core x k_latent matrix whose columns span the task parameter space"""
    L: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=np.float64)
        if L.ndim != 2:
            raise ShapeError(f"basis must be a matrix, got shape {L.shape}")
        if not np.all(np.isfinite(L)):
            raise NumericError("basis entries must be finite")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)
        norms = np.linalg.norm(L, axis=0)
        if np.any(norms > COLUMN_NORM_LIMIT):
            log.warning("basis column norm %.3g exceeds %.0g; raise lambda_ridge", norms.max(), COLUMN_NORM_LIMIT)

    @classmethod
    def zeros(cls, d_core: int, k_latent: int) -> "SharedBasis":
        return cls(np.zeros((d_core, k_latent)))

    @property
    def d_core(self) -> int:
        return self.L.shape[0]

    @property
    def k_latent(self) -> int:
        return self.L.shape[1]

    @property
    def empty(self) -> bool:
        return not np.any(self.L)


@dataclass(frozen=True, eq=False)
class TaskCode:
    """
    s: code vector of length k_latent
    task_id: owning task
    degenerate: set when the task carried no curvature and s was forced to 0
    """
    s: np.ndarray
    task_id: Optional[int] = None
    degenerate: bool = False

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(s)):
            raise NumericError("task code entries must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def sparsity(self) -> float:
        """Fraction of exact zeros."""
        return float(np.mean(self.s == 0.0)) if self.s.size else 1.0


@dataclass(frozen=True, eq=False)
class TaskStats:
    """
    theta: shared-core parameter estimate of the task (d_core)
    z: nonnegative diagonal curvature weights (d_core)
    n_samples: number of sampled sequences behind z
    z_stderr: standard error of each z entry, when estimated
    """
    theta: np.ndarray
    z: np.ndarray
    n_samples: int = 1
    z_stderr: Optional[np.ndarray] = None
    task_id: Optional[int] = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        z = np.array(self.z, dtype=np.float64).reshape(-1)
        if theta.shape != z.shape:
            raise ShapeError(f"theta {theta.shape} and z {z.shape} differ")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(z))):
            raise NumericError("task statistics must be finite")
        if np.any(z < 0):
            raise InputError("curvature weights must be >= 0")
        for a in (theta, z):
            a.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "z", z)

    @property
    def d_core(self) -> int:
        return self.theta.shape[0]


def fisher_diagonal(scores, weights=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted diagonal empirical Fisher: mean over samples of max(w, 0)·score².
    Returns the estimate and the standard error of each entry.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    n = scores.shape[0]
    if n < 1:
        raise InputError("fisher_diagonal needs at least one sample")
    w = np.ones(n) if weights is None else np.maximum(np.asarray(weights, dtype=np.float64).reshape(n), 0.0)
    per_sample = w[:, None] * scores ** 2
    z = per_sample.mean(axis=0)
    stderr = per_sample.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(z, np.inf)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite curvature estimate")
    return z, stderr


def estimate_task_stats(gen: generator.GeneratorParams, disc: discriminator.DiscriminatorParams,
                        n_samples: int, rng, length: int = 20, task_id: Optional[int] = None) -> TaskStats:
    """θ is the generator's shared core; Z weights each sampled sequence's squared core score by D."""
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    mask = gen.core_mask
    seqs = [generator.sample_sequence(gen, length, sub) for sub in rng.spawn(n_samples)]
    scores = np.stack([generator.log_likelihood(gen, s.tokens)[1][mask] for s in seqs])
    q = discriminator.forward_batch(disc, [s.tokens for s in seqs])
    z, stderr = fisher_diagonal(scores, q)
    return TaskStats(gen.core_vector(), z, n_samples, stderr, task_id)


def _check_dims(L: np.ndarray, stats: TaskStats):
    if L.shape[0] != stats.d_core:
        raise ShapeError(f"basis has {L.shape[0]} rows but task statistics have {stats.d_core}")


def solve_task_code(basis: SharedBasis, stats: TaskStats, mu_sparse: float, tol: float = 1e-8,
                    max_sweeps: int = 10000, warm: Optional[np.ndarray] = None) -> TaskCode:
    """argmin_s ‖θ - L s‖²_Z + μ‖s‖₁ by cyclic coordinate descent."""
    L = basis.L
    _check_dims(L, stats)
    k = L.shape[1]
    if not np.any(stats.z):
        log.warning("task %s has all-zero curvature; code forced to 0", stats.task_id)
        return TaskCode(np.zeros(k), stats.task_id, degenerate=True)

    ZL = stats.z[:, None] * L
    a = np.einsum("ij,ij->j", ZL, L)
    s = np.zeros(k) if warm is None else np.array(warm, dtype=np.float64).reshape(k)
    r = stats.theta - L @ s
    half = mu_sparse / 2.0
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(k):
            if a[j] == 0.0:
                if s[j] != 0.0:
                    r += L[:, j] * s[j]
                    s[j] = 0.0
                continue
            rho = ZL[:, j] @ r + a[j] * s[j]
            new = np.sign(rho) * max(abs(rho) - half, 0.0) / a[j]
            delta = new - s[j]
            if delta != 0.0:
                r -= L[:, j] * delta
                s[j] = new
            biggest = max(biggest, abs(delta))
        if biggest < tol:
            break
    else:
        log.warning("coordinate descent hit %d sweeps for task %s", max_sweeps, stats.task_id)
    return TaskCode(s, stats.task_id)


def update_basis(tasks: Sequence[Tuple[TaskStats, TaskCode]], lambda_ridge: float) -> SharedBasis:
    """Exact row-wise ridge solve of argmin_L (1/T)Σ_t ‖θ_t - L s_t‖²_{Z_t} + λ‖L‖²_F."""
    if not tasks:
        raise InputError("update_basis needs at least one task")
    Th = np.stack([st.theta for st, _ in tasks])
    Z = np.stack([st.z for st, _ in tasks])
    S = np.stack([code.s for _, code in tasks])
    T, d = Th.shape
    k = S.shape[1]
    A = np.einsum("ti,tj,tl->ijl", Z, S, S) / T + lambda_ridge * np.eye(k)
    rhs = np.einsum("ti,ti,tj->ij", Z, Th, S) / T
    try:
        if lambda_ridge == 0 and np.any(np.linalg.matrix_rank(A) < k):
            raise np.linalg.LinAlgError("rank deficient")
        L = np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as err:
        raise SolverError(f"singular basis system ({err}); use lambda_ridge > 0") from err
    return SharedBasis(L)


def reconstruct_policy(basis: SharedBasis, code: TaskCode) -> np.ndarray:
    if code.s.shape != (basis.k_latent,):
        raise InputError(f"code of length {code.s.shape[0]} does not fit a basis with {basis.k_latent} columns")
    return basis.L @ code.s


def lifelong_objective(tasks: Sequence[TaskStats], basis: SharedBasis, codes: Sequence[TaskCode],
                       mu_sparse: float, lambda_ridge: float) -> float:
    if len(tasks) != len(codes):
        raise ShapeError(f"{len(tasks)} tasks but {len(codes)} codes")
    total = 0.0
    for stats, code in zip(tasks, codes):
        _check_dims(basis.L, stats)
        r = stats.theta - reconstruct_policy(basis, code)
        total += float(stats.z @ r ** 2) + mu_sparse * float(np.abs(code.s).sum())
    if tasks:
        total /= len(tasks)
    return total + lambda_ridge * float(np.sum(basis.L ** 2))


class TransferInit(NamedTuple):
    core: np.ndarray
    from_basis: bool
    code: Optional[TaskCode] = None


def transfer_init(basis: Optional[SharedBasis], probe_stats: TaskStats, mu_sparse: float) -> TransferInit:
    """Shared-core initialization for a new task: L times the probe's code, or the probe itself on a cold start."""
    if basis is None or basis.empty or basis.d_core != probe_stats.d_core:
        return TransferInit(probe_stats.theta.copy(), False)
    code = solve_task_code(basis, probe_stats, mu_sparse)
    if code.degenerate:
        return TransferInit(probe_stats.theta.copy(), False, code)
    return TransferInit(reconstruct_policy(basis, code), True, code)


class SharedMemory:
    """
    Single-writer store of the basis and every task's statistics and code.
    config: LifelongConfig
    basis: current SharedBasis, None until the first task arrives
    stats, codes: per-task entries keyed by task id, in arrival order
    used: basis columns already seeded with a task's θ
    history: objective after each basis update of the most recent add_task
    mu: guards every mutation
    """

    def __init__(self, config: Optional[LifelongConfig] = None):
        self.config = config or LifelongConfig()
        self.basis: Optional[SharedBasis] = None
        self.stats: Dict[int, TaskStats] = {}
        self.codes: Dict[int, TaskCode] = {}
        self.used = 0
        self.history: List[float] = []
        self.mu = threading.Lock()

    def __len__(self):
        with self.mu:
            return len(self.stats)

    @property
    def d_core(self) -> Optional[int]:
        return None if self.basis is None else self.basis.d_core

    def objective(self) -> float:
        with self.mu:
            return self._objective()

    def _objective(self) -> float:
        ids = list(self.stats)
        return lifelong_objective([self.stats[i] for i in ids], self.basis, [self.codes[i] for i in ids],
                                  self.config.mu_sparse, self.config.lambda_ridge)

    def _solve_codes(self):
        cfg = self.config
        for tid, st in self.stats.items():
            warm = self.codes[tid].s if tid in self.codes else None
            self.codes[tid] = solve_task_code(self.basis, st, cfg.mu_sparse, cfg.tol, cfg.max_sweeps, warm)

    def add_task(self, stats: TaskStats) -> List[float]:
        """
        Store a task and re-fit codes and basis. An unused column is first set
        to the task's θ. Returns the objective recorded after every basis
        update; it never increases.
        """
        with self.mu:
            saved = (self.basis, dict(self.stats), dict(self.codes), self.used, self.history)
            try:
                return self._add_task(stats)
            except Exception:
                self.basis, self.stats, self.codes, self.used, self.history = saved
                log.warning("shared memory left unchanged after a failed update for task %s", stats.task_id)
                raise

    def _add_task(self, stats: TaskStats) -> List[float]:
        cfg = self.config
        if self.basis is None:
            self.basis = SharedBasis.zeros(stats.d_core, cfg.k_latent)
        _check_dims(self.basis.L, stats)
        tid = stats.task_id if stats.task_id is not None else len(self.stats)
        if stats.task_id is None:
            stats = TaskStats(stats.theta, stats.z, stats.n_samples, stats.z_stderr, tid)
        self.stats[tid] = stats
        self.codes.pop(tid, None)
        if self.used < cfg.k_latent and np.any(stats.theta):
            L = self.basis.L.copy()
            L[:, self.used] = stats.theta
            self.basis = SharedBasis(L)
            self.used += 1

        history: List[float] = []
        self._solve_codes()
        prev = self._objective()
        for sweep in range(cfg.sweeps):
            self.basis = update_basis([(self.stats[i], self.codes[i]) for i in self.stats], cfg.lambda_ridge)
            after_basis = self._objective()
            self._solve_codes()
            current = self._objective()
            history.append(after_basis)
            if max(after_basis, current) > prev + 1e-9 * (1.0 + abs(prev)):
                raise SolverError(
                    f"lifelong objective rose from {prev:.12g} to {max(after_basis, current):.12g} in sweep {sweep}"
                )
            prev = current
        self.history = history
        zeros = np.mean([c.sparsity for c in self.codes.values()])
        log.info("shared memory holds %d tasks, objective %.6g, code sparsity %.2f", len(self.stats), prev, zeros)
        return history

    def transfer_init(self, probe_stats: TaskStats) -> TransferInit:
        with self.mu:
            basis = self.basis
        return transfer_init(basis, probe_stats, self.config.mu_sparse)

    def reconstruct(self, task_id: int) -> np.ndarray:
        with self.mu:
            return reconstruct_policy(self.basis, self.codes[task_id])
