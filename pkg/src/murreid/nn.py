"""A small numpy neural stack with explicit backward passes.

Everything is batch-first float64. Sequences are ``B x T x D`` arrays with a
``lengths`` vector; steps at or beyond a sequence's length are padding and
produce zero outputs. Layer functions return ``(output, cache)`` and the
matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


class GradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    max_steps: int | None = 100_000
    clip_norm: float | None = 5.0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def length_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    """B x T boolean mask, True on valid steps."""
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


# ---------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x W^T + b for x of shape (..., I) and W of shape (O, I)."""
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W, dy2.T @ x2, dy2.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int) -> Params:
    """Gates stacked as [input, forget, cell, output]; forget bias starts at 1."""
    b = uniform_init(rng, 4 * hidden, hidden)
    b[hidden : 2 * hidden] = 1.0
    return {
        "W": uniform_init(rng, (4 * hidden, input_dim), hidden),
        "U": uniform_init(rng, (4 * hidden, hidden), hidden),
        "b": b,
    }


def lstm_forward(x: np.ndarray, lengths: np.ndarray, p: Mapping[str, np.ndarray], reverse: bool = False):
    """One LSTM direction over a padded batch.

    With ``reverse`` the valid prefix of each sequence is read back to front,
    starting from a zero state at its last valid step.
    """
    B, T, I = x.shape
    H = p["U"].shape[1]
    if p["W"].shape != (4 * H, I):
        raise ValueError(f"shape mismatch: x {x.shape}, W {p['W'].shape}")
    mask = length_mask(lengths, T).astype(np.float64)
    # input projections for every step at once
    xw = x @ p["W"].T + p["b"]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    tape = []
    for t in steps:
        m = mask[:, t : t + 1]
        z = xw[:, t] + h @ p["U"].T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        tape.append((t, m, h, c, i, f, g, o, tc))
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        out[:, t] = m * h
    return out, (x, p, tape)


def lstm_backward(dout: np.ndarray, cache):
    x, p, tape = cache
    H = p["U"].shape[1]
    W, U = p["W"], p["U"]
    dz_all = np.zeros((x.shape[0], x.shape[1], 4 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((x.shape[0], H))
    dc = np.zeros((x.shape[0], H))
    for t, m, h_prev, c_prev, i, f, g, o, tc in reversed(tape):
        dh = dh + m * dout[:, t]
        dh_new = m * dh
        dc_new = m * dc + dh_new * o * (1 - tc * tc)
        do = dh_new * tc
        di = dc_new * g
        df = dc_new * c_prev
        dg = dc_new * i
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dz_all[:, t] = dz
        dU += dz.T @ h_prev
        dh = (1 - m) * dh + dz @ U
        dc = (1 - m) * dc + dc_new * f
    dx = dz_all @ W
    flat_dz = dz_all.reshape(-1, 4 * H)
    grads = {
        "W": flat_dz.T @ x.reshape(-1, x.shape[-1]),
        "U": dU,
        "b": flat_dz.sum(axis=0),
    }
    return dx, grads


def bilstm_forward(x: np.ndarray, lengths: np.ndarray, fwd: Mapping, bwd: Mapping):
    """Concatenated [forward; backward] states, B x T x 2H.

    A 2-D ``x`` (T x I) is treated as a batch of one and returns T x 2H.
    """
    single = x.ndim == 2
    if single:
        x = x[None]
        lengths = np.atleast_1d(lengths)
    lengths = np.asarray(lengths)
    if np.any(lengths > x.shape[1]) or np.any(lengths < 0):
        raise ValueError("lengths must lie in [0, T]")
    hf, cf = lstm_forward(x, lengths, fwd, reverse=False)
    hb, cb = lstm_forward(x, lengths, bwd, reverse=True)
    out = np.concatenate([hf, hb], axis=-1)
    return (out[0] if single else out), (cf, cb, single)


def bilstm_backward(dout: np.ndarray, cache):
    cf, cb, single = cache
    if single:
        dout = dout[None]
    H = dout.shape[-1] // 2
    dxf, gf = lstm_backward(dout[..., :H], cf)
    dxb, gb = lstm_backward(dout[..., H:], cb)
    dx = dxf + dxb
    return (dx[0] if single else dx), gf, gb


# ---------------------------------------------------------------------------
# pooling and attention


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def attention_pool(states: np.ndarray, query: np.ndarray, W_a: np.ndarray, lengths):
    """Bilinear ("general") attention: score_t = query . W_a . state_t.

    Returns the softmax-weighted sum of the valid states.
    """
    single = states.ndim == 2
    if single:
        states = states[None]
        lengths = np.atleast_1d(lengths)
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("attention over a sequence with no valid steps")
    D = states.shape[-1]
    if query.shape != (D,) or W_a.shape != (D, D):
        raise ValueError(f"shape mismatch: states {states.shape}, query {query.shape}, W_a {W_a.shape}")
    mask = length_mask(lengths, states.shape[1])
    v = W_a.T @ query
    weights = _masked_softmax(states @ v, mask)
    context = np.einsum("bt,btd->bd", weights, states)
    cache = (states, query, W_a, v, weights, single)
    return (context[0] if single else context), cache


def attention_backward(dcontext: np.ndarray, cache):
    states, query, W_a, v, weights, single = cache
    if single:
        dcontext = dcontext[None]
    dstates = weights[:, :, None] * dcontext[:, None, :]
    dw = np.einsum("btd,bd->bt", states, dcontext)
    ds = weights * (dw - (weights * dw).sum(axis=1, keepdims=True))
    dstates += ds[:, :, None] * v
    dv = np.einsum("bt,btd->d", ds, states)
    grads = {"query": W_a @ dv, "W_a": np.outer(query, dv)}
    return (dstates[0] if single else dstates), grads


def global_avg_pool(states: np.ndarray, lengths):
    single = states.ndim == 2
    if single:
        states = states[None]
        lengths = np.atleast_1d(lengths)
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("global average pooling needs at least one valid step")
    mask = length_mask(lengths, states.shape[1])
    pooled = (states * mask[:, :, None]).sum(axis=1) / lengths[:, None]
    return (pooled[0] if single else pooled), (mask, lengths, single)


def global_avg_pool_backward(dpooled: np.ndarray, cache):
    mask, lengths, single = cache
    if single:
        dpooled = dpooled[None]
    d = mask[:, :, None] * (dpooled / lengths[:, None])[:, None, :]
    return d[0] if single else d


def adaptive_segments(length: int, target: int) -> list[tuple[int, int]]:
    """Row k covers [floor(k*T/target), ceil((k+1)*T/target))."""
    if length < 1 or target < 1:
        raise ValueError("need length >= 1 and target >= 1")
    return [((k * length) // target, -((-(k + 1) * length) // target)) for k in range(target)]


def adaptive_pool_matrix(length: int, target: int, width: int | None = None) -> np.ndarray:
    P = np.zeros((target, width or length))
    for k, (lo, hi) in enumerate(adaptive_segments(length, target)):
        P[k, lo:hi] = 1.0 / (hi - lo)
    return P


def adaptive_avg_pool(states: np.ndarray, target: int, lengths=None):
    """Mean-pool each sequence's valid prefix into ``target`` rows."""
    single = states.ndim == 2
    if single:
        states = states[None]
        lengths = None if lengths is None else np.atleast_1d(lengths)
    B, T, _ = states.shape
    if lengths is None:
        lengths = np.full(B, T)
    P = np.stack([adaptive_pool_matrix(int(n), target, T) for n in lengths])
    pooled = P @ states
    return (pooled[0] if single else pooled), (P, single)


def adaptive_avg_pool_backward(dpooled: np.ndarray, cache):
    P, single = cache
    if single:
        dpooled = dpooled[None]
    d = np.transpose(P, (0, 2, 1)) @ dpooled
    return d[0] if single else d


# ---------------------------------------------------------------------------
# dropout and loss


def dropout(x: np.ndarray, p: float = 0.2, train: bool = True, rng: np.random.Generator | int | None = None):
    """Inverted dropout. Returns (output, mask); the mask is None in eval mode."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not train or p == 0:
        return x, None
    rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask):
    return dy if mask is None else dy * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if B == 0:
        raise ValueError("empty batch")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return float(loss), d / B


# ---------------------------------------------------------------------------
# optimizers


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        _check_finite(grads)
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        _check_finite(grads)
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_and_grads: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Params,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error of analytic gradients against central differences.

    Step size is 1e-5 * max(1, |theta|). The relative error of one entry is
    |a - n| / max(|a|, |n|, floor). ``max_entries`` samples a subset of each
    parameter's entries.
    """
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for name, theta in params.items():
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for k in idx:
            orig = flat[k]
            h = 1e-5 * max(1.0, abs(orig))
            flat[k] = orig + h
            up, _ = loss_and_grads(params)
            flat[k] = orig - h
            down, _ = loss_and_grads(params)
            flat[k] = orig
            num = (up - down) / (2 * h)
            a = a_flat[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
