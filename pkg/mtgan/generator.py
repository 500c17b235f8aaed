"""
LSTM token-policy generator.

The generator emits action tokens one at a time from
G(y_t | Y_1:t-1) = softmax(c + V·h_t), where h_t is the LSTM state after
consuming the previous token. Input ids are shifted by one so that id 0 is a
reserved start token that begins every sequence: action token a is fed back
as input id a + 1, and the embedding table therefore has vocab + 1 rows.

Parameters split into a shared core (the LSTM weights, identical in shape for
every task of a run whatever its vocabulary) and per-task heads (embedding,
output bias c and output matrix V). The flat parameter vector lists the core
first, so `vec[:d_core]` is what the shared memory stores.

Training follows the adversarial recipe: per-step action values are estimated
by Monte-Carlo completion of the prefix under the current policy and scored by
the discriminator, and the score-function gradient of the sequence
log-likelihood weighted by those values is ascended.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from mtgan import discriminator, kernel
from mtgan.errors import InputError, NumericError, ShapeError

log = logging.getLogger(__name__)

START_TOKEN = 0

SAMPLED = "sampled"
EXPERT = "expert"

DEFAULT_ROLLOUTS = 16
DEFAULT_MAX_NORM = 5.0

# parameter vector order; lstm_W and lstm_b lead and form the shared core
PARAM_FIELDS = ("lstm_W", "lstm_b", "embedding", "c", "V")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """
    GeneratorParams holds every weight of the generator. Arrays are copied and
    made read-only on construction, so a value can never change after it is built.
    lstm_W: stacked gate weights (4·d_h x (d_emb + d_h))
    lstm_b: stacked gate biases (4·d_h)
    embedding: input embedding ((vocab + 1) x d_emb), row 0 is the start token
    c: output bias, the shared latent basis vector of the softmax head (vocab)
    V: output weights (vocab x d_h)
    """
    lstm_W: np.ndarray
    lstm_b: np.ndarray
    embedding: np.ndarray
    c: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in PARAM_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        vocab, d_h = self.V.shape
        d_emb = self.embedding.shape[1] if self.embedding.ndim == 2 else -1
        if (
            vocab < 1
            or self.c.shape != (vocab,)
            or self.embedding.shape != (vocab + 1, d_emb)
            or self.lstm_W.shape != (4 * d_h, d_emb + d_h)
            or self.lstm_b.shape != (4 * d_h,)
        ):
            raise ShapeError(
                "inconsistent generator shapes: "
                + ", ".join(f"{n} {getattr(self, n).shape}" for n in PARAM_FIELDS)
            )
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"generator parameter {name} is not finite")

    @classmethod
    def init(cls, vocab: int, d_emb: int = 8, d_h: int = 32, rng=None, scale: float = 0.1):
        """Draws every weight from N(0, scale²); rng defaults to a fresh seeded generator."""
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            lstm_W=rng.normal(0.0, scale, (4 * d_h, d_emb + d_h)),
            lstm_b=rng.normal(0.0, scale, 4 * d_h),
            embedding=rng.normal(0.0, scale, (vocab + 1, d_emb)),
            c=rng.normal(0.0, scale, vocab),
            V=rng.normal(0.0, scale, (vocab, d_h)),
        )

    @classmethod
    def zeros(cls, vocab: int, d_emb: int = 8, d_h: int = 32):
        return cls(
            lstm_W=np.zeros((4 * d_h, d_emb + d_h)),
            lstm_b=np.zeros(4 * d_h),
            embedding=np.zeros((vocab + 1, d_emb)),
            c=np.zeros(vocab),
            V=np.zeros((vocab, d_h)),
        )

    @property
    def vocab(self) -> int:
        return self.V.shape[0]

    @property
    def d_h(self) -> int:
        return self.V.shape[1]

    @property
    def d_emb(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_core(self) -> int:
        return self.lstm_W.size + self.lstm_b.size

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_FIELDS)

    @property
    def core_mask(self) -> np.ndarray:
        """Partition labels over the flat vector: True for shared-core scalars, False for task-head scalars."""
        mask = np.zeros(self.n_params, dtype=bool)
        mask[: self.d_core] = True
        return mask

    @property
    def lstm(self) -> kernel.LSTMWeights:
        return kernel.LSTMWeights(self.lstm_W, self.lstm_b)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_FIELDS])

    def with_vector(self, vec) -> "GeneratorParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected a parameter vector of length {self.n_params}, got {vec.shape}")
        parts = {}
        offset = 0
        for name in PARAM_FIELDS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            parts[name] = vec[offset:offset + size].reshape(shape)
            offset += size
        return GeneratorParams(**parts)

    def core_vector(self) -> np.ndarray:
        return self.to_vector()[: self.d_core]

    def with_core(self, core) -> "GeneratorParams":
        core = np.asarray(core, dtype=np.float64)
        if core.shape != (self.d_core,):
            raise ShapeError(f"core vector must have length {self.d_core}, got {core.shape}")
        vec = self.to_vector()
        vec[: self.d_core] = core
        return self.with_vector(vec)

    def arrays(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_FIELDS}


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """
    An ordered list of action tokens y_1..y_T.
    log_probs: per-step log G(y_t | Y_1:t-1) when the sequence was sampled
    rewards: per-step rewards when the sequence came from a plant rollout
    source: SAMPLED or EXPERT
    """
    tokens: Tuple[int, ...]
    log_probs: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    source: str = SAMPLED

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 1:
            raise InputError("a token sequence needs at least one token")
        if min(tokens) < 0:
            raise InputError("token ids must be non-negative")
        if self.source not in (SAMPLED, EXPERT):
            raise InputError(f"unknown sequence source {self.source!r}")
        for name in ("log_probs", "rewards"):
            arr = getattr(self, name)
            if arr is not None:
                arr = _frozen(arr)
                if arr.shape != (len(tokens),):
                    raise ShapeError(f"{name} must have one entry per token")
                object.__setattr__(self, name, arr)
        if self.log_probs is not None and np.any(self.log_probs > 0.0):
            raise InputError("log-probabilities must be <= 0")

    def __len__(self):
        return len(self.tokens)

    def check_vocab(self, vocab: int):
        if max(self.tokens) >= vocab:
            raise InputError(f"token {max(self.tokens)} out of range for vocabulary {vocab}")

    def window(self, start: int, length: int) -> "TokenSequence":
        """The sub-sequence tokens[start:start+length], carrying rewards along."""
        if start < 0 or length < 1 or start + length > len(self.tokens):
            raise InputError(f"window [{start}, {start + length}) outside a sequence of {len(self.tokens)}")
        rewards = None if self.rewards is None else self.rewards[start:start + length]
        lp = None if self.log_probs is None else self.log_probs[start:start + length]
        return TokenSequence(self.tokens[start:start + length], lp, rewards, self.source)


def _tokens_of(seq: Union[TokenSequence, Sequence[int]]) -> List[int]:
    return list(seq.tokens) if isinstance(seq, TokenSequence) else [int(t) for t in seq]


def initial_state(params: GeneratorParams, batch: Optional[int] = None):
    shape = (params.d_h,) if batch is None else (batch, params.d_h)
    return np.zeros(shape), np.zeros(shape)


def _logits(params: GeneratorParams, h, c_state, prev_input):
    x = params.embedding[prev_input]
    h2, c2 = kernel.lstm_cell(x, h, c_state, params.lstm)
    return kernel.affine(h2, params.V, params.c), h2, c2


def step(params: GeneratorParams, h, c_state, prev_token: int):
    """
    Consumes one input id (START_TOKEN, or an action token shifted by one) and
    returns (dist, h', c') where dist is the distribution over the next action.
    """
    if not 0 <= int(prev_token) <= params.vocab:
        raise InputError(f"input id {prev_token} outside [0, {params.vocab}]")
    z, h2, c2 = _logits(params, h, c_state, int(prev_token))
    return kernel.softmax(z), h2, c2


def _draw(rng, dist) -> int:
    # inverse CDF keeps draws identical for identical uniforms
    idx = int(np.searchsorted(np.cumsum(dist), rng.random(), side="right"))
    return min(idx, len(dist) - 1)


def _draw_batch(rng, P) -> np.ndarray:
    u = rng.random(P.shape[0])
    idx = (np.cumsum(P, axis=1) <= u[:, None]).sum(axis=1)
    return np.minimum(idx, P.shape[1] - 1)


def sample_sequence(params: GeneratorParams, length: int, rng) -> TokenSequence:
    """Draws y_1..y_length from the policy, recording each step's log-probability."""
    if length < 1:
        raise InputError("sequence length must be >= 1")
    h, c = initial_state(params)
    prev = START_TOKEN
    tokens, logps = [], []
    for _ in range(length):
        z, h, c = _logits(params, h, c, prev)
        lp = log_softmax(z)
        y = _draw(rng, np.exp(lp))
        tokens.append(y)
        logps.append(min(lp[y], 0.0))
        prev = y + 1
    return TokenSequence(tuple(tokens), np.array(logps), source=SAMPLED)


def greedy_decode(params: GeneratorParams, length: int) -> List[int]:
    """Argmax decoding from the start token; ties go to the lowest id."""
    if length < 1:
        raise InputError("sequence length must be >= 1")
    h, c = initial_state(params)
    prev = START_TOKEN
    tokens = []
    for _ in range(length):
        z, h, c = _logits(params, h, c, prev)
        y = int(np.argmax(z))
        tokens.append(y)
        prev = y + 1
    return tokens


def _complete(params, h, c, last_input, remaining, n, rng) -> np.ndarray:
    """Samples n completions of `remaining` tokens from a shared state, batched."""
    out = np.empty((n, remaining), dtype=np.int64)
    H = np.tile(h, (n, 1))
    C = np.tile(c, (n, 1))
    prev = np.full(n, last_input, dtype=np.int64)
    for r in range(remaining):
        z, H, C = _logits(params, H, C, prev)
        tok = _draw_batch(rng, kernel.softmax(z))
        out[:, r] = tok
        prev = tok + 1
    return out


def _rollout_scores(gen, disc, tokens, h, c, horizon, n_rollouts, rng) -> np.ndarray:
    # h, c: state after consuming START, y_1 .. y_{t-1}; tokens holds y_1 .. y_t
    completions = _complete(gen, h, c, tokens[-1] + 1, horizon - len(tokens), n_rollouts, rng)
    full = np.concatenate([np.tile(np.asarray(tokens, dtype=np.int64), (n_rollouts, 1)), completions], axis=1)
    return discriminator.forward_batch(disc, full)


def mc_q_estimate(gen: GeneratorParams, disc, prefix, action: int, horizon: int, n_rollouts: int, rng) -> float:
    """
    Action value of appending `action` to `prefix`: the discriminator score of the
    completed sequence when it reaches the horizon, otherwise the mean score over
    n_rollouts completions sampled from the generator.
    """
    tokens = _tokens_of(prefix) + [int(action)]
    if len(tokens) > horizon:
        raise InputError(f"prefix of {len(tokens) - 1} tokens plus an action exceeds horizon {horizon}")
    if n_rollouts < 1:
        raise InputError("n_rollouts must be >= 1")
    if max(tokens) >= gen.vocab or min(tokens) < 0:
        raise InputError(f"token out of range for vocabulary {gen.vocab}")
    if len(tokens) == horizon:
        return float(discriminator.forward(disc, TokenSequence(tokens)))
    h, c = initial_state(gen)
    prev = START_TOKEN
    for y in tokens[:-1]:
        _, h, c = _logits(gen, h, c, prev)
        prev = y + 1
    _, h, c = _logits(gen, h, c, prev)
    return float(_rollout_scores(gen, disc, tokens, h, c, horizon, n_rollouts, rng).mean())


def _tape_forward(params: GeneratorParams, tokens: Sequence[int], tape: kernel.Tape):
    leaves = {n: tape.leaf(getattr(params, n), n) for n in PARAM_FIELDS}
    h, c = initial_state(params)
    prev = START_TOKEN
    logps, states = [], []
    for y in tokens:
        x = tape.embed(leaves["embedding"], prev)
        h, c = tape.lstm_cell(x, h, c, leaves["lstm_W"], leaves["lstm_b"])
        z = tape.affine(h, leaves["V"], leaves["c"])
        logps.append(tape.pick(tape.log_softmax(z), y))
        states.append((h.value, c.value))
        prev = y + 1
    return leaves, logps, states


def _collect(params: GeneratorParams, leaves) -> np.ndarray:
    return np.concatenate([
        (leaves[n].grad if leaves[n].grad is not None else np.zeros_like(getattr(params, n))).ravel()
        for n in PARAM_FIELDS
    ])


def weighted_log_likelihood(params: GeneratorParams, tokens, weights) -> Tuple[float, np.ndarray]:
    """Returns Σ_t w_t·log G(y_t|Y_1:t-1) and its gradient over the flat parameter vector."""
    tokens = _tokens_of(tokens)
    if max(tokens) >= params.vocab:
        raise InputError(f"token out of range for vocabulary {params.vocab}")
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(tokens),))
    tape = kernel.Tape()
    leaves, logps, _ = _tape_forward(params, tokens, tape)
    tape.backward(zip(logps, weights))
    value = float(sum(w * lp.value for w, lp in zip(weights, logps)))
    return value, _collect(params, leaves)


def log_likelihood(params: GeneratorParams, tokens) -> Tuple[float, np.ndarray]:
    """Sequence log-likelihood Σ_t log G(y_t|Y_1:t-1) and its gradient."""
    return weighted_log_likelihood(params, tokens, 1.0)


def nll(params: GeneratorParams, data: Sequence[TokenSequence]) -> float:
    """Mean negative log-likelihood per sequence over data."""
    if not data:
        raise InputError("nll of an empty dataset")
    total = 0.0
    for seq in data:
        h, c = initial_state(params)
        prev = START_TOKEN
        for y in seq.tokens:
            z, h, c = _logits(params, h, c, prev)
            total -= log_softmax(z)[y]
            prev = y + 1
    return total / len(data)


def _sequence_gradient(gen, disc, seq, n_rollouts, baseline, rng) -> np.ndarray:
    tokens = _tokens_of(seq)
    T = len(tokens)
    tape = kernel.Tape()
    leaves, logps, states = _tape_forward(gen, tokens, tape)
    q = np.empty(T)
    q[T - 1] = discriminator.forward(disc, TokenSequence(tokens))
    for j in range(T - 1):
        # states[j] follows START, y_1 .. y_j; the rollout feeds y_{j+1} next
        h, c = states[j]
        q[j] = _rollout_scores(gen, disc, tokens[: j + 1], h, c, T, n_rollouts, rng).mean()
    tape.backward(zip(logps, q - baseline))
    return _collect(gen, leaves)


def sample_gradients(gen: GeneratorParams, disc, batch: Sequence[TokenSequence], n_rollouts: int,
                     rng, baseline: float = 0.0, workers: int = 1) -> np.ndarray:
    """
    One policy-gradient vector per sequence, stacked in batch order (B x n_params).
    Each sequence gets its own sub-generator spawned from rng, so the result does
    not depend on how many workers run the rollouts.
    """
    if not batch:
        raise InputError("policy gradient of an empty batch")
    if n_rollouts < 1:
        raise InputError("n_rollouts must be >= 1")
    for seq in batch:
        seq.check_vocab(gen.vocab)
    rngs = rng.spawn(len(batch))
    jobs = list(zip(batch, rngs))

    def one(job):
        seq, sub = job
        return _sequence_gradient(gen, disc, seq, n_rollouts, baseline, sub)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grads = list(pool.map(one, jobs))
    else:
        grads = [one(job) for job in jobs]
    return np.stack(grads)


def policy_gradient(gen: GeneratorParams, disc, batch: Sequence[TokenSequence], n_rollouts: int = DEFAULT_ROLLOUTS,
                    rng=None, baseline: float = 0.0, workers: int = 1) -> np.ndarray:
    """Batch mean of Σ_t ∇log G(y_t|Y_1:t-1)·(Q̂(Y_1:t-1, y_t) - baseline)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return sample_gradients(gen, disc, batch, n_rollouts, rng, baseline, workers).mean(axis=0)


def clip_norm(gradient: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    if max_norm is None:
        return gradient
    norm = float(np.linalg.norm(gradient))
    if norm > max_norm:
        return gradient * (max_norm / norm)
    return gradient


def adversarial_update(gen: GeneratorParams, gradient, lr: float = 0.1,
                       max_norm: Optional[float] = DEFAULT_MAX_NORM) -> GeneratorParams:
    """θ ← θ + lr·clip(gradient). Returns new parameters; gen is left untouched."""
    if lr <= 0:
        raise InputError("learning rate must be > 0")
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        raise NumericError("refusing an update with non-finite gradient entries")
    return gen.with_vector(gen.to_vector() + lr * clip_norm(gradient, max_norm))


def mle_pretrain(gen: GeneratorParams, data: Sequence[TokenSequence], epochs: int, lr: float, rng=None,
                 batch_size: Optional[int] = None, max_norm: Optional[float] = None) -> GeneratorParams:
    """
    Ascends the mean sequence log-likelihood of data. With batch_size None each
    epoch is one full-batch step; otherwise minibatches are drawn in an order
    shuffled by rng.
    """
    if not data:
        raise InputError("maximum-likelihood pretraining needs data")
    for seq in data:
        seq.check_vocab(gen.vocab)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(data)
    size = n if batch_size is None else max(1, min(batch_size, n))
    for epoch in range(epochs):
        order = np.arange(n) if size == n else rng.permutation(n)
        for start in range(0, n, size):
            idx = order[start:start + size]
            grad = np.mean([log_likelihood(gen, data[i])[1] for i in idx], axis=0)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite likelihood gradient in epoch {epoch}")
            gen = gen.with_vector(gen.to_vector() + lr * clip_norm(grad, max_norm))
        if log.isEnabledFor(logging.DEBUG):
            log.debug("mle epoch %d nll %.6f", epoch, nll(gen, data))
    return gen
