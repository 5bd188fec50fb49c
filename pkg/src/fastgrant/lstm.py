"""From-scratch stacked LSTM with BPTT, inverted dropout and Adam.

Shapes follow a time-major convention: a batch of windows is ``(T, B, I)``.
Each layer keeps one fused weight matrix ``W`` of shape ``(4*O, I + O)``
whose row blocks are the input, forget, output and candidate gates, applied
to the concatenation ``[x_t; h_{t-1}]``. A sigmoid dense read-out maps the
top hidden state to an activity probability.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import save_npz

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def param_count(I: int, O: int) -> int:
    """Per-layer parameter count by the closed form K = 4(I+1)O + O^2."""
    if I < 0 or O < 0:
        raise ValueError("sizes must be non-negative")
    return 4 * (I + 1) * O + O * O


@dataclass
class LstmState:
    h: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, O: int, batch: int | None = None) -> "LstmState":
        shape = (O,) if batch is None else (batch, O)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class LstmLayer:
    W: np.ndarray   # (4*O, I + O)
    b: np.ndarray   # (4*O,)

    def __post_init__(self):
        four_o, cols = self.W.shape
        if four_o % 4 or self.b.shape != (four_o,) or cols < four_o // 4:
            raise ValueError(f"inconsistent LSTM layer shapes W={self.W.shape} b={self.b.shape}")

    @classmethod
    def init(cls, I: int, O: int, rng: np.random.Generator, forget_bias: float = 1.0) -> "LstmLayer":
        bound = 1.0 / math.sqrt(O)
        W = rng.uniform(-bound, bound, size=(4 * O, I + O))
        b = np.zeros(4 * O)
        b[O:2 * O] = forget_bias
        return cls(W, b)

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden_size

    @property
    def n_params(self) -> int:
        return self.W.size + self.b.size


def cell_forward(layer: LstmLayer, x_t, prev: LstmState):
    """One LSTM step. Works on a single vector or a batch of rows."""
    x_t = np.asarray(x_t, dtype=float)
    if not (np.isfinite(x_t).all() and np.isfinite(prev.h).all() and np.isfinite(prev.C).all()):
        raise FloatingPointError("non-finite input to LSTM cell")
    O = layer.hidden_size
    xh = np.concatenate([x_t, prev.h], axis=-1)
    z = xh @ layer.W.T + layer.b
    i = sigmoid(z[..., :O])
    f = sigmoid(z[..., O:2 * O])
    o = sigmoid(z[..., 2 * O:3 * O])
    g = np.tanh(z[..., 3 * O:])
    C = f * prev.C + i * g
    tc = np.tanh(C)
    h = o * tc
    cache = (xh, i, f, o, g, prev.C, tc)
    return LstmState(h, C), cache


def rnn_forward(w_xh, w_hh, w_hy, xs, h0=None):
    """Plain tanh RNN read-out, h_t = tanh(w_hh h_{t-1} + w_xh x_t), y_t = w_hy h_t."""
    w_xh, w_hh, w_hy = (np.asarray(w, dtype=float) for w in (w_xh, w_hh, w_hy))
    h = np.zeros(w_hh.shape[0]) if h0 is None else np.asarray(h0, dtype=float)
    ys, hs = [], []
    for x in np.asarray(xs, dtype=float):
        h = np.tanh(w_hh @ h + w_xh @ np.atleast_1d(x))
        hs.append(h)
        ys.append(w_hy @ h)
    return np.array(ys), np.array(hs)


@dataclass
class TrainConfig:
    hidden_sizes: tuple = (32, 16)
    dropout: float = 0.2
    epochs: int = 50
    unroll: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.unroll < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("unroll, epochs and batch_size must be >= 1")


class LstmNetwork:
    def __init__(self, input_size: int = 1, hidden_sizes=(32, 16), dropout: float = 0.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.layers = []
        I = input_size
        for O in hidden_sizes:
            self.layers.append(LstmLayer.init(I, O, rng))
            I = O
        bound = 1.0 / math.sqrt(I)
        self.dense_W = rng.uniform(-bound, bound, size=I)
        self.dense_b = np.zeros(1)
        self.dropout = dropout

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(l.hidden_size for l in self.layers)

    def params(self) -> dict:
        """Live views of every parameter array, keyed by name."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"W{k}"] = layer.W
            out[f"b{k}"] = layer.b
        out["dense_W"] = self.dense_W
        out["dense_b"] = self.dense_b
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def predict_proba(self, windows) -> np.ndarray:
        """Probability that the step after each window is active; windows (B, T) or (B, T, I)."""
        X = _as_time_major(windows)
        y, _ = forward_sequence(self, X, mode="infer")
        return y[-1]

    def save(self, path) -> None:
        arrays = {f"p_{k}": v for k, v in self.params().items()}
        save_npz(path, version=np.array(CHECKPOINT_VERSION),
                 shapes=np.array([[l.input_size, l.hidden_size] for l in self.layers]),
                 dropout=np.array(self.dropout), **arrays)

    @classmethod
    def load(cls, path) -> "LstmNetwork":
        z = np.load(path)
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(z['version'])}")
        shapes = z["shapes"]
        net = cls(int(shapes[0][0]), tuple(int(s[1]) for s in shapes), float(z["dropout"]))
        for k, v in net.params().items():
            v[...] = z[f"p_{k}"]
        return net


def _as_time_major(windows) -> np.ndarray:
    X = np.asarray(windows, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    return np.transpose(X, (1, 0, 2))


@dataclass
class ForwardCache:
    X: np.ndarray
    steps: list          # per layer, per t: cell cache
    masks: list          # per layer output, (B, O) inverted-dropout mask or None
    tops: np.ndarray     # (T, B, O_last) dense input after dropout
    y: np.ndarray        # (T, B)


def forward_sequence(net: LstmNetwork, X, mode: str = "infer", rng: np.random.Generator | None = None,
                     masks=None):
    """Run the stack over a time-major batch ``X`` of shape (T, B, I).

    In ``train`` mode each layer output is multiplied by an inverted-dropout
    mask drawn once per sequence (or taken from ``masks``); ``infer`` mode
    applies no dropout and no rescaling.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.shape[0] == 0:
        raise ValueError("empty window")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    T, B, _ = X.shape
    rate = net.dropout if mode == "train" else 0.0
    if masks is None:
        masks = []
        for layer in net.layers:
            if rate > 0:
                rng = rng if rng is not None else np.random.default_rng()
                masks.append((rng.random((B, layer.hidden_size)) >= rate) / (1.0 - rate))
            else:
                masks.append(None)
    inp = X
    steps = []
    for layer, mask in zip(net.layers, masks):
        state = LstmState.zeros(layer.hidden_size, B)
        out = np.empty((T, B, layer.hidden_size))
        layer_steps = []
        for t in range(T):
            state, cache = cell_forward(layer, inp[t], state)
            layer_steps.append(cache)
            out[t] = state.h if mask is None else state.h * mask
        steps.append(layer_steps)
        inp = out
    y = sigmoid(inp @ net.dense_W + net.dense_b[0])
    return y, ForwardCache(X, steps, masks, inp, y)


def loss_and_grads(net: LstmNetwork, cache: ForwardCache, targets, weights=None):
    """MSE over weighted steps and its gradient w.r.t. every parameter.

    ``targets`` and ``weights`` have shape (T, B); weights default to one.
    The loss is sum(w * (y - target)^2) / sum(w).
    """
    y = cache.y
    targets = np.asarray(targets, dtype=float).reshape(y.shape)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).reshape(y.shape)
    norm = w.sum()
    if norm <= 0:
        raise ValueError("loss weights sum to zero")
    resid = y - targets
    loss = float((w * resid * resid).sum() / norm)
    grads = backward_bptt(net, cache, 2.0 * w * resid / norm)
    return loss, grads


def backward_bptt(net: LstmNetwork, cache: ForwardCache, dy) -> dict:
    """Gradients given dLoss/dy for every output step, unrolled through all steps."""
    dy = np.asarray(dy, dtype=float)
    if dy.shape != cache.y.shape or len(cache.steps) != len(net.layers):
        raise RuntimeError("cache does not match the network or upstream gradient")
    y = cache.y
    dz = dy * y * (1.0 - y)                           # (T, B)
    grads = {
        "dense_W": np.einsum("tb,tbo->o", dz, cache.tops),
        "dense_b": np.array([dz.sum()]),
    }
    d_above = dz[:, :, None] * net.dense_W[None, None, :]   # (T, B, O_last)
    T = y.shape[0]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        O = layer.hidden_size
        I = layer.input_size
        mask = cache.masks[k]
        if mask is not None:
            d_above = d_above * mask
        dW = np.zeros_like(layer.W)
        db = np.zeros_like(layer.b)
        dx = np.empty((T,) + d_above.shape[1:2] + (I,))
        dh_next = np.zeros(d_above.shape[1:])
        dc_next = np.zeros_like(dh_next)
        for t in range(T - 1, -1, -1):
            xh, i, f, o, g, c_prev, tc = cache.steps[k][t]
            dh = d_above[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dzt = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
            dW += dzt.T @ xh
            db += dzt.sum(axis=0)
            dxh = dzt @ layer.W
            dx[t] = dxh[:, :I]
            dh_next = dxh[:, I:]
        grads[f"W{k}"] = dW
        grads[f"b{k}"] = db
        d_above = dx
    return grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``; ``t`` starts at 1."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.t = t
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(net: LstmNetwork, windows, targets, config: TrainConfig, state: AdamState | None = None):
    """Fit next-step targets from windows; returns the per-epoch mean loss.

    ``windows`` is (N, T) or (N, T, I); ``targets`` is (N,). The loss only
    scores the last step of each window, the gradient flows through all of
    them.
    """
    windows = np.asarray(windows, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if windows.shape[0] != targets.size:
        raise ValueError("windows and targets differ in length")
    if windows.shape[0] == 0:
        raise ValueError("no training windows")
    net.dropout = config.dropout
    rng = np.random.default_rng(config.seed)
    state = state or AdamState()
    params = net.params()
    N = targets.size
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            X = _as_time_major(windows[idx])
            T, B = X.shape[:2]
            y, cache = forward_sequence(net, X, mode="train", rng=rng)
            tgt = np.zeros((T, B))
            tgt[-1] = targets[idx]
            wts = np.zeros((T, B))
            wts[-1] = 1.0
            loss, grads = loss_and_grads(net, cache, tgt, wts)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            clip_global_norm(grads, config.clip_norm)
            adam_step(params, grads, state, state.t + 1, config.learning_rate, config.beta1, config.beta2,
                      config.eps)
            total += loss * B
        history.append(total / N)
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return history


def write_loss_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(history):
            w.writerow([k, repr(float(v))])
