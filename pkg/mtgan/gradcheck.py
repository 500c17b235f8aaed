"""
Finite-difference verification of every backward pass.

Each primitive is checked through a random linear read-out: for inputs x and
a fixed random weight w of the output's shape, f(x) = Σ w·forward(x) has the
gradient backward(w). Composite checks cover the generator's sequence
log-likelihood and the discriminator's minimax loss. Every component runs
over n_seeds independent draws and reports its worst relative error.
"""
import logging
from typing import Callable, Dict, List, Sequence

import numpy as np

from mtgan import discriminator, generator, kernel

log = logging.getLogger(__name__)

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _primitive_error(forward: Callable, backward: Callable, inputs: List[np.ndarray], rng) -> float:
    """Worst relative error of backward against central differences, over all inputs jointly."""
    shapes = [np.shape(a) for a in inputs]
    sizes = [int(np.prod(s)) for s in shapes]
    out, _ = forward(*inputs)
    w = rng.normal(size=np.shape(out))

    def unflatten(theta):
        parts, offset = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(theta[offset:offset + size].reshape(shape))
            offset += size
        return parts

    def f(theta):
        out, cache = forward(*unflatten(theta))
        grads = backward(w, cache)
        return float(np.sum(w * out)), np.concatenate([np.ravel(g) for g in grads[: len(inputs)]])

    theta0 = np.concatenate([np.ravel(a) for a in inputs])
    return kernel.grad_check(f, theta0)


def _lstm_forward(x, h, c, W, b):
    (h2, c2), cache = kernel.lstm_cell_forward(x, h, c, W, b)
    return np.concatenate([h2, c2]), (cache, h2.shape[-1])


def _lstm_backward(dout, packed):
    cache, H = packed
    return kernel.lstm_cell_backward(dout[:H], dout[H:], cache)


def _concat_forward(a, b):
    return kernel.concat_forward([a, b])


def _embed_forward(table):
    return kernel.embed_forward(table, np.array([0, 2, 2, 1]))


def _case(name, rng):
    """Forward, backward and random inputs for one primitive."""
    if name == "affine":
        return kernel.affine_forward, kernel.affine_backward, [rng.normal(size=4), rng.normal(size=(3, 4)),
                                                               rng.normal(size=3)]
    if name == "affine_batch":
        return kernel.affine_forward, kernel.affine_backward, [rng.normal(size=(5, 4)), rng.normal(size=(3, 4)),
                                                               rng.normal(size=3)]
    if name == "sigmoid":
        return kernel.sigmoid_forward, kernel.sigmoid_backward, [rng.normal(size=6)]
    if name == "tanh":
        return kernel.tanh_forward, kernel.tanh_backward, [rng.normal(size=6)]
    if name == "relu":
        return kernel.relu_forward, kernel.relu_backward, [_away_from_zero(rng, 6)]
    if name == "softmax":
        return kernel.softmax_forward, kernel.softmax_backward, [rng.normal(size=5)]
    if name == "log_softmax":
        return kernel.log_softmax_forward, kernel.log_softmax_backward, [rng.normal(size=5)]
    if name == "lstm_cell":
        D, H = 3, 4
        return _lstm_forward, _lstm_backward, [rng.normal(size=D), rng.normal(size=H), rng.normal(size=H),
                                               rng.normal(scale=0.5, size=(4 * H, D + H)), rng.normal(size=4 * H)]
    if name == "conv1d":
        return kernel.conv1d_forward, kernel.conv1d_backward, [rng.normal(size=(7, 3)), rng.normal(size=(3, 3)),
                                                               np.array(rng.normal())]
    if name == "conv1d_bank":
        return kernel.conv1d_forward, kernel.conv1d_backward, [rng.normal(size=(7, 3)),
                                                               rng.normal(size=(4, 2, 3)), rng.normal(size=4)]
    if name == "max_over_time":
        return kernel.max_over_time_forward, kernel.max_over_time_backward, [rng.permutation(24).reshape(6, 4) * 0.1]
    if name == "embed":
        return _embed_forward, kernel.embed_backward, [rng.normal(size=(4, 3))]
    if name == "concat":
        return _concat_forward, kernel.concat_backward, [rng.normal(size=3), rng.normal(size=2)]
    raise KeyError(name)


PRIMITIVES = ("affine", "affine_batch", "sigmoid", "tanh", "relu", "softmax", "log_softmax", "lstm_cell",
              "conv1d", "conv1d_bank", "max_over_time", "embed", "concat")


def generator_error(rng) -> float:
    """Sequence log-likelihood of a 3-token sequence."""
    params = generator.GeneratorParams.init(3, d_emb=3, d_h=4, rng=rng, scale=0.5)
    tokens = tuple(int(t) for t in rng.integers(0, 3, size=3))
    return kernel.grad_check(lambda v: generator.log_likelihood(params.with_vector(v), tokens), params.to_vector())


def discriminator_error(rng) -> float:
    """Minimax loss on a batch of two positives and two negatives."""
    params = discriminator.DiscriminatorParams.init(4, k=3, windows=(2, 3), n_kernels=2, rng=rng, scale=0.5)

    def seq(source):
        return generator.TokenSequence(tuple(int(t) for t in rng.integers(0, 4, size=5)), source=source)

    batch = discriminator.LabeledBatch([seq(generator.EXPERT) for _ in range(2)],
                                       [seq(generator.SAMPLED) for _ in range(2)])

    def f(v):
        loss, grad, _ = discriminator.minimax_loss(params.with_vector(v), batch)
        return loss, grad

    return kernel.grad_check(f, params.to_vector())


def run_suite(n_seeds: int = 10, components: Sequence[str] = None) -> Dict[str, float]:
    """Worst relative error per component over n_seeds seeded draws."""
    names = list(components) if components is not None else list(PRIMITIVES) + ["generator_log_likelihood",
                                                                                 "discriminator_loss"]
    results = {}
    for index, name in enumerate(names):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng([seed, index])
            if name == "generator_log_likelihood":
                err = generator_error(rng)
            elif name == "discriminator_loss":
                err = discriminator_error(rng)
            else:
                fwd, bwd, inputs = _case(name, rng)
                err = _primitive_error(fwd, bwd, inputs, rng)
            worst = max(worst, err)
        results[name] = worst
        log.debug("gradcheck %s worst relative error %.3e", name, worst)
    return results


def passed(results: Dict[str, float], tol: float = TOLERANCE) -> bool:
    return all(err < tol for err in results.values())
