"""
Convolutional sequence discriminator.

A sequence Y_1:T is embedded into a T x k matrix (row t is the embedding of
y_t), convolved with a bank of kernels per window size l, passed through ReLU
and max-pooled over time, so every kernel contributes one feature whatever T
is. A fully connected head maps the pooled features to one logit whose
logistic squashing is the probability that the sequence is real. That
probability is also the generator's reward.

Training ascends the minimax objective
    mean over pairs of  μ·log(1 - D(negative)) + λ·log D(positive)
on batches holding exactly as many generated negatives as expert positives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from scipy.special import expit

from mtgan import generator, kernel
from mtgan.errors import InputError, NumericError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_WINDOWS = (2, 3, 4)
DEFAULT_KERNELS = 8

# probabilities are clamped to [CLAMP, 1 - CLAMP] before taking logs
CLAMP = 1e-7


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscriminatorParams:
    """
    embedding: token embedding table (vocab x k)
    kernels: one bank per window size l, each (n_l x l x k)
    biases: one bias vector per bank (n_l)
    head_w: fully connected weights over the pooled features (Σ n_l)
    head_b: logit bias, shape (1,)
    """
    embedding: np.ndarray
    kernels: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen(self.embedding))
        object.__setattr__(self, "kernels", tuple(_frozen(k) for k in self.kernels))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        object.__setattr__(self, "head_w", _frozen(self.head_w))
        object.__setattr__(self, "head_b", _frozen(np.reshape(self.head_b, (1,))))
        if self.embedding.ndim != 2 or not self.kernels or len(self.kernels) != len(self.biases):
            raise ShapeError("discriminator needs an embedding table and one bias vector per kernel bank")
        k = self.embedding.shape[1]
        for K, b in zip(self.kernels, self.biases):
            if K.ndim != 3 or K.shape[2] != k or b.shape != (K.shape[0],):
                raise ShapeError(f"kernel bank {K.shape} / bias {b.shape} do not match embedding width {k}")
        if self.head_w.shape != (self.n_features,):
            raise ShapeError(f"head weights must have {self.n_features} entries, got {self.head_w.shape}")
        for arr in self._parts():
            if not np.all(np.isfinite(arr)):
                raise NumericError("discriminator parameters must be finite")

    @classmethod
    def init(cls, vocab: int, k: int = 8, windows: Sequence[int] = DEFAULT_WINDOWS,
             n_kernels: int = DEFAULT_KERNELS, rng=None, scale: float = 0.1):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            embedding=rng.normal(0.0, scale, (vocab, k)),
            kernels=tuple(rng.normal(0.0, scale, (n_kernels, l, k)) for l in windows),
            biases=tuple(np.zeros(n_kernels) for _ in windows),
            head_w=rng.normal(0.0, scale, n_kernels * len(windows)),
            head_b=np.zeros(1),
        )

    @classmethod
    def zeros(cls, vocab: int, k: int = 8, windows: Sequence[int] = DEFAULT_WINDOWS,
              n_kernels: int = DEFAULT_KERNELS):
        return cls(
            embedding=np.zeros((vocab, k)),
            kernels=tuple(np.zeros((n_kernels, l, k)) for l in windows),
            biases=tuple(np.zeros(n_kernels) for _ in windows),
            head_w=np.zeros(n_kernels * len(windows)),
            head_b=np.zeros(1),
        )

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def k(self) -> int:
        return self.embedding.shape[1]

    @property
    def windows(self) -> Tuple[int, ...]:
        return tuple(K.shape[1] for K in self.kernels)

    @property
    def n_features(self) -> int:
        return sum(K.shape[0] for K in self.kernels)

    def _parts(self):
        return (self.embedding, *self.kernels, *self.biases, self.head_w, self.head_b)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._parts())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._parts()])

    def with_vector(self, vec) -> DiscriminatorParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected a parameter vector of length {self.n_params}, got {vec.shape}")
        out = []
        offset = 0
        for a in self._parts():
            out.append(vec[offset:offset + a.size].reshape(a.shape))
            offset += a.size
        n = len(self.kernels)
        return DiscriminatorParams(
            embedding=out[0],
            kernels=tuple(out[1:1 + n]),
            biases=tuple(out[1 + n:1 + 2 * n]),
            head_w=out[1 + 2 * n],
            head_b=out[2 + 2 * n],
        )


@dataclass(frozen=True)
class LabeledBatch:
    """Expert positives and generated negatives, equal in count and sharing one length."""
    positives: Tuple[generator.TokenSequence, ...]
    negatives: Tuple[generator.TokenSequence, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if len(self.positives) < 1 or len(self.positives) != len(self.negatives):
            raise InputError(
                f"unbalanced batch: {len(self.positives)} positives vs {len(self.negatives)} negatives"
            )
        lengths = {len(s) for s in self.positives + self.negatives}
        if len(lengths) != 1:
            raise ShapeError(f"batch sequences must share one length, got {sorted(lengths)}")

    @property
    def size(self) -> int:
        return len(self.positives)

    @property
    def length(self) -> int:
        return len(self.positives[0])


def _token_array(params: DiscriminatorParams, seq) -> np.ndarray:
    tokens = np.asarray(seq.tokens if isinstance(seq, generator.TokenSequence) else seq, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab):
        raise InputError(f"token out of range for vocabulary {params.vocab}")
    return tokens


def embed_sequence(params: DiscriminatorParams, seq) -> np.ndarray:
    """The T x k matrix whose row t is the embedding of y_t."""
    return params.embedding[_token_array(params, seq)]


def probability(z):
    """Logistic of the logit, kept inside [CLAMP, 1 - CLAMP] so D never saturates."""
    return np.clip(expit(z), CLAMP, 1.0 - CLAMP)


def _check_length(params: DiscriminatorParams, T: int):
    if T < max(params.windows):
        raise ShapeError(f"sequence of length {T} is shorter than the widest window {max(params.windows)}")


def forward_batch(params: DiscriminatorParams, tokens) -> np.ndarray:
    """D for every row of a (B x T) token array, vectorized over the batch."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab):
        raise InputError(f"token out of range for vocabulary {params.vocab}")
    _check_length(params, tokens.shape[1])
    E = params.embedding[tokens]
    pooled = [kernel.relu(kernel.conv1d(E, K, b)).max(axis=-2) for K, b in zip(params.kernels, params.biases)]
    z = np.concatenate(pooled, axis=-1) @ params.head_w + params.head_b[0]
    return probability(z)


def forward(params: DiscriminatorParams, seq) -> float:
    """Probability that seq is real data."""
    tokens = _token_array(params, seq)
    _check_length(params, tokens.shape[0])
    M = params.embedding[tokens]
    pooled = [kernel.max_over_time(kernel.relu(kernel.conv1d(M, K, b))) for K, b in zip(params.kernels, params.biases)]
    z = kernel.affine(np.concatenate(pooled), params.head_w[None, :], params.head_b)[0]
    return float(probability(z))


def _tape_logit(params: DiscriminatorParams, tokens, tape: kernel.Tape):
    emb = tape.leaf(params.embedding, "embedding")
    Ks = [tape.leaf(K, f"kernel{l}") for K, l in zip(params.kernels, params.windows)]
    bs = [tape.leaf(b, f"bias{l}") for b, l in zip(params.biases, params.windows)]
    hw = tape.leaf(params.head_w[None, :], "head_w")
    hb = tape.leaf(params.head_b, "head_b")
    M = tape.embed(emb, tokens)
    pooled = [tape.max_over_time(tape.relu(tape.conv1d(M, K, b))) for K, b in zip(Ks, bs)]
    logit = tape.affine(tape.concat(pooled), hw, hb)
    return (emb, Ks, bs, hw, hb), logit


def _collect(params: DiscriminatorParams, leaves) -> np.ndarray:
    emb, Ks, bs, hw, hb = leaves

    def g(var, like):
        return var.grad if var.grad is not None else np.zeros_like(like)

    parts = [g(emb, params.embedding)]
    parts += [g(K, Kp) for K, Kp in zip(Ks, params.kernels)]
    parts += [g(b, bp) for b, bp in zip(bs, params.biases)]
    parts += [g(hw, params.head_w[None, :]), g(hb, params.head_b)]
    return np.concatenate([p.ravel() for p in parts])


class MinimaxLoss(NamedTuple):
    loss: float
    gradient: np.ndarray
    clamped: int


def minimax_loss(params: DiscriminatorParams, batch: LabeledBatch, mu: float = 1.0, lam: float = 1.0) -> MinimaxLoss:
    """
    loss = mean over pairs of μ·log(1 - D(neg)) + λ·log D(pos), together with its
    gradient (the ascent direction for D) and the number of clamped probabilities.
    """
    if mu <= 0 or lam <= 0:
        raise InputError("minimax weights mu and lambda must be > 0")
    n = batch.size
    grad = np.zeros(params.n_params)
    loss = 0.0
    clamped = 0
    for seq, positive in [(s, True) for s in batch.positives] + [(s, False) for s in batch.negatives]:
        tokens = _token_array(params, seq)
        _check_length(params, tokens.shape[0])
        tape = kernel.Tape()
        leaves, logit = _tape_logit(params, tokens, tape)
        d = float(expit(logit.value[0]))
        dc = min(max(d, CLAMP), 1.0 - CLAMP)
        inside = dc == d
        clamped += not inside
        if positive:
            loss += lam * np.log(dc)
            dlogit = lam * (1.0 - d) if inside else 0.0
        else:
            loss += mu * np.log(1.0 - dc)
            dlogit = -mu * d if inside else 0.0
        if dlogit != 0.0:
            tape.backward([(logit, np.array([dlogit / n]))])
            grad += _collect(params, leaves)
    if clamped:
        log.debug("minimax loss clamped %d probabilities", clamped)
    return MinimaxLoss(loss / n, grad, clamped)


def accuracy(params: DiscriminatorParams, batch: LabeledBatch) -> float:
    """Fraction classified correctly; D >= 0.5 counts as a 'real' verdict."""
    pos = forward_batch(params, [s.tokens for s in batch.positives])
    neg = forward_batch(params, [s.tokens for s in batch.negatives])
    return float(((pos >= 0.5).sum() + (neg < 0.5).sum()) / (2 * batch.size))


def make_batch(gen: generator.GeneratorParams, experts: Sequence[generator.TokenSequence],
               batch_size: int, rng) -> LabeledBatch:
    """batch_size positives drawn without replacement from experts, plus as many fresh generator samples."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if len(experts) < batch_size:
        raise InputError(f"{len(experts)} expert sequences cannot fill a batch of {batch_size}")
    idx = rng.choice(len(experts), size=batch_size, replace=False)
    positives = [experts[i] for i in sorted(idx)]
    T = len(positives[0])
    negatives = [generator.sample_sequence(gen, T, sub) for sub in rng.spawn(batch_size)]
    return LabeledBatch(positives, negatives)


class DiscriminatorStep(NamedTuple):
    params: DiscriminatorParams
    loss: float
    accuracy: float
    clamped: int
    positives: int
    negatives: int


def apply_gradient(params: DiscriminatorParams, gradient, lr: float) -> DiscriminatorParams:
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        raise NumericError("refusing a discriminator update with non-finite gradient entries")
    if lr == 0:
        return params
    return params.with_vector(params.to_vector() + lr * gradient)


def train_step(params: DiscriminatorParams, gen: generator.GeneratorParams,
               experts: Sequence[generator.TokenSequence], batch_size: int = 25, lr: float = 0.1,
               mu: float = 1.0, lam: float = 1.0, rng=None) -> DiscriminatorStep:
    """One ascent step on the minimax loss of a freshly drawn balanced batch."""
    if lr < 0:
        raise InputError("learning rate must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = make_batch(gen, experts, batch_size, rng)
    result = minimax_loss(params, batch, mu, lam)
    acc = accuracy(params, batch)
    return DiscriminatorStep(
        apply_gradient(params, result.gradient, lr), result.loss, acc, result.clamped,
        len(batch.positives), len(batch.negatives),
    )
