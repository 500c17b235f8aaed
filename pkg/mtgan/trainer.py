"""
Lifelong adversarial training over a stream of tasks.

The Trainer pulls tasks from a TaskQueue and, for each one:
  1. records expert episodes and cuts fixed-length windows from them,
  2. pretrains the generator by maximum likelihood and the discriminator on
     balanced batches,
  3. for tasks after the first, runs a short probe and swaps in the shared
     core reconstructed from the shared memory,
  4. alternates g-steps (policy gradient with rollout action values) and
     d-steps (minimax ascent) for the configured number of iterations,
  5. estimates the task's statistics and folds them into the shared memory,
  6. evaluates the greedy policy against the expert and appends metrics.

A task whose plant diverges or whose numbers go non-finite is flagged as
aborted and the stream carries on. Everything is seeded from the config, so
one (config, seed) pair reproduces the metrics byte for byte whatever the
number of workers.
"""
import csv
import io
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from mtgan import discriminator, environments, generator, shared_memory
from mtgan.errors import ConfigError, DivergenceError, InputError, NumericError, SolverError
from mtgan.taskq import TaskQueue

log = logging.getLogger(__name__)

# trainerTrace is a flag used while debugging to log per-rollout detail
trainerTrace = False

PRETRAIN = "pretrain"
ADVERSARIAL = "adversarial"
EVAL = "eval"
ABORTED = "aborted"

CSV_HEADER = ("iter", "task_id", "phase", "gen_loss", "disc_loss", "disc_acc", "avg_return", "error_rate")

TRANSFER_HEADS = ("random", "pretrained")

_COUNTS = ("batch_size", "g_steps", "d_steps", "n_rollouts", "seq_len", "eval_horizon", "eval_episodes",
           "expert_episodes", "windows_per_episode", "d_emb", "d_h", "disc_k", "disc_kernels", "workers")


@dataclass(frozen=True)
class TrainerConfig:
    """
    gamma: discount of evaluation returns
    batch_size: sequences per g-step and pairs per d-step
    gen_lr, disc_lr, pretrain_lr: step sizes
    g_steps, d_steps: updates of each player per iteration
    n_rollouts: Monte-Carlo completions per action value
    seq_len: length of adversarial training sequences
    eval_horizon, eval_episodes: evaluation episode length and count
    iterations: adversarial iterations per task
    pretrain_epochs, disc_pretrain_steps: warm-up before the adversarial loop
    expert_episodes, windows_per_episode, holdout: expert data and its held-out share
    mu, lam: minimax weights on the generated and real terms
    max_norm: generator gradient clip
    baseline: constant subtracted from action values
    trajectory_caps: longest expert recording per plant kind, at most the built-in ceiling
    transfer_heads: "random" redraws a transferred task's heads, "pretrained" keeps its MLE heads
    seed: root of every random stream
    workers: threads for rollouts and evaluation episodes
    lifelong: shared memory settings
    """
    gamma: float = 0.99
    batch_size: int = 25
    gen_lr: float = 0.1
    disc_lr: float = 0.1
    pretrain_lr: float = 0.1
    g_steps: int = 1
    d_steps: int = 1
    n_rollouts: int = generator.DEFAULT_ROLLOUTS
    seq_len: int = 20
    eval_horizon: int = environments.DEFAULT_HORIZON
    eval_episodes: int = 5
    iterations: int = 200
    pretrain_epochs: int = 20
    disc_pretrain_steps: int = 10
    expert_episodes: int = 10
    windows_per_episode: int = 8
    holdout: float = 0.2
    mu: float = 1.0
    lam: float = 1.0
    max_norm: float = generator.DEFAULT_MAX_NORM
    baseline: float = 0.0
    d_emb: int = 8
    d_h: int = 32
    disc_k: int = 8
    disc_windows: Tuple[int, ...] = discriminator.DEFAULT_WINDOWS
    disc_kernels: int = discriminator.DEFAULT_KERNELS
    trajectory_caps: Dict[str, int] = field(default_factory=lambda: dict(environments.TRAJECTORY_CAPS))
    transfer_heads: str = "random"
    seed: int = 0
    workers: int = 1
    lifelong: shared_memory.LifelongConfig = field(default_factory=shared_memory.LifelongConfig)

    def __post_init__(self):
        if isinstance(self.lifelong, dict):
            object.__setattr__(self, "lifelong", shared_memory.LifelongConfig.from_dict(self.lifelong))
        try:
            object.__setattr__(self, "disc_windows", tuple(int(w) for w in self.disc_windows))
            object.__setattr__(self, "trajectory_caps", {**environments.TRAJECTORY_CAPS, **self.trajectory_caps})
            self._validate()
        except (TypeError, ValueError) as err:
            raise ConfigError(f"malformed configuration value: {err}") from err

    def _validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}", field="gamma")
        for name in ("gen_lr", "disc_lr", "pretrain_lr", "mu", "lam", "max_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", field=name)
        for name in _COUNTS:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        for name in ("iterations", "pretrain_epochs", "disc_pretrain_steps", "seed"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0", field=name)
        if self.transfer_heads not in TRANSFER_HEADS:
            raise ConfigError(f"transfer_heads must be one of {TRANSFER_HEADS}", field="transfer_heads")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must lie in (0, 1)", field="holdout")
        if not self.disc_windows or min(self.disc_windows) < 1:
            raise ConfigError("disc_windows needs positive window sizes", field="disc_windows")
        if self.seq_len < max(self.disc_windows):
            raise ConfigError(f"seq_len {self.seq_len} is shorter than the widest window", field="seq_len")
        for kind, cap in self.trajectory_caps.items():
            name = f"trajectory_caps.{kind}"
            if kind not in environments.TRAJECTORY_CAPS:
                raise ConfigError(f"unknown plant kind {kind!r}", field=name)
            if not isinstance(cap, int) or cap > environments.TRAJECTORY_CAPS[kind]:
                raise ConfigError(f"{kind} trajectories are capped at {environments.TRAJECTORY_CAPS[kind]} steps",
                                  field=name)
            if cap < self.seq_len:
                raise ConfigError(f"{kind} cap {cap} is shorter than seq_len {self.seq_len}", field=name)

    def trajectory_cap(self, spec: environments.PlantSpec) -> int:
        return min(spec.horizon, self.trajectory_caps[spec.kind.value])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["disc_windows"] = list(self.disc_windows)
        out["trajectory_caps"] = dict(self.trajectory_caps)
        out["lifelong"] = self.lifelong.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}", field=key)
        return cls(**data)


class MetricRecord(NamedTuple):
    iter: int
    task_id: int
    phase: str
    gen_loss: float
    disc_loss: float
    disc_acc: float
    avg_return: float
    error_rate: float


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) or isinstance(v, str):
        return str(v)
    return f"{v:.9g}"


class RunMetrics:
    """
    records: append-only MetricRecords, one per (iteration, phase) of each task
    objective: (task_id, sweep, lifelong objective) after every basis update
    aborted: ids of tasks that diverged or went non-finite
    balanced_batches, balance_violations: audit of every d-step batch
    """

    def __init__(self):
        self.records: List[MetricRecord] = []
        self.objective: List[Tuple[int, int, float]] = []
        self.aborted: List[int] = []
        self.balanced_batches = 0
        self.balance_violations = 0
        self.mu = threading.Lock()

    def __len__(self):
        return len(self.records)

    def append(self, record: MetricRecord):
        with self.mu:
            self.records.append(record)

    def audit(self, positives: int, negatives: int):
        with self.mu:
            self.balanced_batches += 1
            if positives != negatives:
                self.balance_violations += 1

    def for_task(self, task_id: int, phase: Optional[str] = None) -> List[MetricRecord]:
        return [r for r in self.records if r.task_id == task_id and (phase is None or r.phase == phase)]

    def to_csv_text(self, comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if comment:
            for line in comment.splitlines():
                buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def to_csv(self, path, comment: Optional[str] = None):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text(comment))

    @staticmethod
    def read_csv(path) -> List[MetricRecord]:
        with open(path, newline="") as fh:
            lines = [line for line in fh if not line.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise InputError(f"{path} is not a metrics file")
        return [
            MetricRecord(int(row[0]), int(row[1]), row[2], *(float(v) for v in row[3:]))
            for row in reader if row
        ]


def discounted_return(rewards, gamma: float) -> float:
    """Σ_i γ^i r_i."""
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f"discount must lie in [0, 1], got {gamma}")
    r = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(r * gamma ** np.arange(r.size))) if r.size else 0.0


def error_rate(policy_return: float, expert_return: float) -> float:
    """
    Normalized regret against the expert, clamp(policy/expert - 1, 0, 1).
    Returns are non-positive, so matching the expert scores 0 and doing twice
    as badly or worse scores 1.
    """
    if expert_return == 0:
        if policy_return == 0:
            return 0.0
        log.warning("expert return is 0 but policy return is %.6g; error rate set to 1", policy_return)
        return 1.0
    return float(min(max(policy_return / expert_return - 1.0, 0.0), 1.0))


def _episodes(spec, episodes, rng, run, workers):
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    subs = rng.spawn(episodes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, subs))
    return [run(sub) for sub in subs]


def evaluate(gen: generator.GeneratorParams, spec: environments.PlantSpec, episodes: int, horizon: int,
             gamma: float, rng, workers: int = 1) -> Tuple[float, float]:
    """
    Mean (return, discounted return) of the greedy token plan replayed from
    start states drawn per episode.
    """
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    tokens = generator.greedy_decode(gen, horizon)

    def run(sub):
        traj = environments.simulate(spec, tokens, environments.initial_state(spec, sub))
        return traj.total_reward, discounted_return(traj.rewards, gamma)

    results = _episodes(spec, episodes, rng, run, workers)
    return float(np.mean([r for r, _ in results])), float(np.mean([d for _, d in results]))


def evaluate_expert(spec: environments.PlantSpec, episodes: int, horizon: int, gamma: float, rng,
                    workers: int = 1) -> Tuple[float, float]:
    """Same start states as evaluate() for an equal rng; the scripted controller acts."""
    controller = environments.make_expert(spec)

    def run(sub):
        seq = environments.expert_rollout(spec, controller, horizon, state0=environments.initial_state(spec, sub))
        return float(np.sum(seq.rewards)), discounted_return(seq.rewards, gamma)

    results = _episodes(spec, episodes, rng, run, workers)
    return float(np.mean([r for r, _ in results])), float(np.mean([d for _, d in results]))


def baseline_uniform(spec: environments.PlantSpec, episodes: int, horizon: int, gamma: float, rng,
                     workers: int = 1) -> float:
    """Mean return of tokens drawn uniformly at random, same start states as evaluate()."""

    def run(sub):
        state0 = environments.initial_state(spec, sub)
        tokens = sub.integers(0, spec.vocab, size=horizon)
        return environments.simulate(spec, tokens, state0).total_reward

    return float(np.mean(_episodes(spec, episodes, rng, run, workers)))


class TaskResult(NamedTuple):
    task_id: int
    gen: generator.GeneratorParams
    disc: discriminator.DiscriminatorParams
    stats: Optional[shared_memory.TaskStats]
    transferred: bool
    returns: List[float]


def _split_windows(experts, seq_len, per_episode, holdout, rng):
    windows = []
    for ep in experts:
        if len(ep) < seq_len:
            raise InputError(f"expert episode of {len(ep)} steps is shorter than seq_len {seq_len}")
        for start in rng.integers(0, len(ep) - seq_len + 1, size=per_episode):
            windows.append(ep.window(int(start), seq_len))
    order = rng.permutation(len(windows))
    n_held = max(1, int(round(holdout * len(windows))))
    held = [windows[i] for i in order[:n_held]]
    train = [windows[i] for i in order[n_held:]]
    return train, held


class Trainer:
    """
    Trainer owns the state of a lifelong run.
    config: TrainerConfig
    memory: SharedMemory shared across tasks
    metrics: RunMetrics of every task seen
    generators: trained generator per task id
    discriminator: discriminator of the most recent task
    specs: task specs per task id, in stream order
    numTasks: tasks pulled from the stream so far
    """

    def __init__(self, config: Optional[TrainerConfig] = None, memory: Optional[shared_memory.SharedMemory] = None):
        self.config = config or TrainerConfig()
        self.memory = memory if memory is not None else shared_memory.SharedMemory(self.config.lifelong)
        self.metrics = RunMetrics()
        self.generators: Dict[int, generator.GeneratorParams] = {}
        self.discriminator: Optional[discriminator.DiscriminatorParams] = None
        self.specs: Dict[int, environments.PlantSpec] = {}
        self.numTasks = 0
        self._lock = threading.Lock()

    def _task_rngs(self, ordinal: int) -> Dict[str, np.random.Generator]:
        root = np.random.default_rng([self.config.seed, ordinal])
        names = ("init", "expert", "pretrain", "disc", "probe", "train", "eval", "stats", "heads")
        return dict(zip(names, root.spawn(len(names))))

    def _record(self, it, task_id, phase, gen_loss, disc_loss, disc_acc, avg_return, error):
        self.metrics.append(MetricRecord(it, task_id, phase, float(gen_loss), float(disc_loss), float(disc_acc),
                                         float(avg_return), float(error)))

    def _held_accuracy(self, disc, gen, held, rng) -> float:
        negatives = [generator.sample_sequence(gen, len(held[0]), sub) for sub in rng.spawn(len(held))]
        return discriminator.accuracy(disc, discriminator.LabeledBatch(held, negatives))

    def _d_steps(self, disc, gen, train, steps, rng):
        cfg = self.config
        loss = float("nan")
        size = min(cfg.batch_size, len(train))
        for sub in rng.spawn(steps):
            out = discriminator.train_step(disc, gen, train, size, cfg.disc_lr, cfg.mu, cfg.lam, sub)
            self.metrics.audit(out.positives, out.negatives)
            disc, loss = out.params, out.loss
        return disc, loss

    def _g_step(self, gen, disc, rng):
        cfg = self.config
        batch_rng, grad_rng = rng.spawn(2)
        batch = [generator.sample_sequence(gen, cfg.seq_len, sub) for sub in batch_rng.spawn(cfg.batch_size)]
        scores = discriminator.forward_batch(disc, [s.tokens for s in batch])
        loss = float(-np.mean(np.log(np.clip(scores, discriminator.CLAMP, 1.0))))
        grad = generator.policy_gradient(gen, disc, batch, cfg.n_rollouts, grad_rng, cfg.baseline, cfg.workers)
        if trainerTrace:
            log.debug("g-step mean D %.6f gradient norm %.6g", float(scores.mean()), float(np.linalg.norm(grad)))
        return generator.adversarial_update(gen, grad, cfg.gen_lr, cfg.max_norm), loss, float(scores.mean())

    def _adversarial(self, gen, disc, train, rng):
        loss = q_mean = float("nan")
        g_rng, d_rng = rng.spawn(2)
        for sub in g_rng.spawn(self.config.g_steps):
            gen, loss, q_mean = self._g_step(gen, disc, sub)
        disc, d_loss = self._d_steps(disc, gen, train, self.config.d_steps, d_rng)
        return gen, disc, loss, d_loss, q_mean

    def train_task(self, spec: environments.PlantSpec, task_id: Optional[int] = None, transfer: bool = True,
                   remember: bool = True, ordinal: Optional[int] = None) -> TaskResult:
        """
        Trains one task end to end and appends its metric records. With transfer
        set and a compatible basis in memory, the generator core is replaced by
        the transfer initialization after the probe run. With remember set the
        task's statistics are folded into the shared memory.
        """
        cfg = self.config
        task_id = self.numTasks if task_id is None else task_id
        rngs = self._task_rngs(task_id if ordinal is None else ordinal)
        eval_seed = int(rngs["eval"].integers(2 ** 63))

        def eval_rng():
            return np.random.default_rng(eval_seed)

        horizon = cfg.trajectory_cap(spec)
        experts = [environments.expert_rollout(spec, horizon=horizon, rng=sub)
                   for sub in rngs["expert"].spawn(cfg.expert_episodes)]
        train, held = _split_windows(experts, cfg.seq_len, cfg.windows_per_episode, cfg.holdout, rngs["expert"])
        if not train:
            raise InputError("no expert windows left for training after the held-out split")
        expert_return, _ = evaluate_expert(spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, eval_rng())

        gen = generator.GeneratorParams.init(spec.vocab, cfg.d_emb, cfg.d_h, rngs["init"])
        gen = generator.mle_pretrain(gen, train, cfg.pretrain_epochs, cfg.pretrain_lr, rngs["pretrain"],
                                     max_norm=cfg.max_norm)
        disc = discriminator.DiscriminatorParams.init(spec.vocab, cfg.disc_k, cfg.disc_windows, cfg.disc_kernels,
                                                      rngs["init"])
        disc, d_loss = self._d_steps(disc, gen, train, cfg.disc_pretrain_steps, rngs["disc"])

        transferred = False
        if transfer and len(self.memory) and self.memory.d_core == gen.d_core:
            probe_gen, probe_disc = gen, disc
            probe_rng, stats_rng = rngs["probe"].spawn(2)
            for sub in probe_rng.spawn(cfg.lifelong.probe_iterations):
                probe_gen, probe_disc, _, _, _ = self._adversarial(probe_gen, probe_disc, train, sub)
            probe = shared_memory.estimate_task_stats(probe_gen, probe_disc, cfg.lifelong.stats_samples, stats_rng,
                                                      cfg.seq_len, task_id)
            init = self.memory.transfer_init(probe)
            if init.from_basis:
                if cfg.transfer_heads == "random":
                    gen = generator.GeneratorParams.init(spec.vocab, cfg.d_emb, cfg.d_h, rngs["heads"])
                gen = gen.with_core(init.core)
                transferred = True
            log.info("task %d starts from %s", task_id, "the shared basis" if transferred else "its probe run")

        returns = []
        avg_return, _ = evaluate(gen, spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, eval_rng(), cfg.workers)
        returns.append(avg_return)
        acc = self._held_accuracy(disc, gen, held, rngs["train"])
        self._record(0, task_id, PRETRAIN, generator.nll(gen, train) / cfg.seq_len, d_loss, acc, avg_return,
                     error_rate(avg_return, expert_return))

        for it, sub in enumerate(rngs["train"].spawn(cfg.iterations), start=1):
            step_rng, acc_rng = sub.spawn(2)
            gen, disc, g_loss, d_loss, q_mean = self._adversarial(gen, disc, train, step_rng)
            acc = self._held_accuracy(disc, gen, held, acc_rng)
            avg_return, _ = evaluate(gen, spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, eval_rng(),
                                     cfg.workers)
            returns.append(avg_return)
            self._record(it, task_id, ADVERSARIAL, g_loss, d_loss, acc, avg_return,
                         error_rate(avg_return, expert_return))
            log.debug("task %d iter %d mean D of samples %.6f held-out accuracy %.3f", task_id, it, q_mean, acc)

        stats = None
        if remember:
            stats = shared_memory.estimate_task_stats(gen, disc, cfg.lifelong.stats_samples, rngs["stats"],
                                                      cfg.seq_len, task_id)
            history = self.memory.add_task(stats)
            with self.metrics.mu:
                self.metrics.objective.extend((task_id, k, v) for k, v in enumerate(history))

        avg_return, _ = evaluate(gen, spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, eval_rng(), cfg.workers)
        self._record(cfg.iterations + 1, task_id, EVAL, float("nan"), float("nan"),
                     self._held_accuracy(disc, gen, held, rngs["stats"]), avg_return,
                     error_rate(avg_return, expert_return))
        log.info("task %d done: return %.4f, expert %.4f", task_id, avg_return, expert_return)
        return TaskResult(task_id, gen, disc, stats, transferred, returns)

    def run(self, tasks: Union[TaskQueue, Iterable[environments.PlantSpec]]) -> RunMetrics:
        """Trains every task of the stream in order. Divergent tasks are flagged and skipped."""
        queue = tasks if isinstance(tasks, TaskQueue) else TaskQueue(list(tasks))
        if not queue:
            raise InputError("the task stream is empty")
        while True:
            spec = queue.pop()
            if spec is None:
                break
            with self._lock:
                task_id = self.numTasks
                self.numTasks += 1
                self.specs[task_id] = spec
            try:
                result = self.train_task(spec, task_id)
            except (DivergenceError, NumericError, SolverError) as err:
                log.warning("task %d aborted: %s", task_id, err)
                with self.metrics.mu:
                    self.metrics.aborted.append(task_id)
                nan = float("nan")
                self._record(0, task_id, ABORTED, nan, nan, nan, nan, 1.0)
                continue
            with self._lock:
                self.generators[task_id] = result.gen
                self.discriminator = result.disc
        return self.metrics


def run(config: TrainerConfig, tasks: Sequence[environments.PlantSpec]) -> RunMetrics:
    if not tasks:
        raise InputError("the task list is empty")
    return Trainer(config).run(tasks)


class JumpstartRow(NamedTuple):
    seed: int
    init: str
    jumpstart_return: float
    final_return: float


JUMPSTART_WINDOW = 10


def jumpstart_comparison(config: TrainerConfig, memory: shared_memory.SharedMemory,
                         targets: Sequence[environments.PlantSpec], seeds: Sequence[int]) -> List[JumpstartRow]:
    """
    Trains a target task twice per seed, once from the transfer initialization
    and once from a random one, with every other random stream paired. The
    jump-start return is the mean over the first ten adversarial iterations.
    """
    if not targets:
        raise InputError("no target tasks")
    rows = []
    for k, seed in enumerate(seeds):
        spec = targets[k % len(targets)]
        for init, transfer in (("transfer", True), ("random", False)):
            trainer = Trainer(replace(config, seed=int(seed)), memory)
            result = trainer.train_task(spec, task_id=spec.task_id or 0, transfer=transfer, remember=False)
            early = result.returns[1:1 + JUMPSTART_WINDOW] or result.returns[:1]
            final = trainer.metrics.for_task(spec.task_id or 0, EVAL)[-1].avg_return
            rows.append(JumpstartRow(int(seed), init, float(np.mean(early)), final))
            log.info("seed %d %s init: jump-start %.4f final %.4f", seed, init, rows[-1].jumpstart_return, final)
    return rows


def write_jumpstart_csv(path, rows: Sequence[JumpstartRow]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(JumpstartRow._fields)
        for r in rows:
            writer.writerow([r.seed, r.init, _fmt(r.jumpstart_return), _fmt(r.final_return)])
