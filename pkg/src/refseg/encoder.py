"""Expression side: tokenizer, LSTM encoder and the expression-to-class classifier.

The LSTM uses the usual gate layout. Weights are stacked as one ``(4H, D+H)``
matrix with row blocks in the order input, forget, output, candidate, acting on
the concatenation ``[x; h]``.

All batched functions take embedded inputs ``X`` of shape ``(B, T, D)`` plus a
``(B, T)`` mask; sequences are left-aligned and padded at the end.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingTable
from .errors import (
    BadLabel,
    DimensionMismatch,
    EmptyExpression,
    ShapeMismatch,
)

_TOKEN_RE = re.compile(r"""[.,:;!?'"]|[^\s.,:;!?'"]+""")


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace, and split off . , : ; ! ? ' " as tokens."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise EmptyExpression(f"expression {text!r} has no tokens")
    return tokens


def sigmoid(z):
    # split by sign so large |z| never overflows exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def glorot(rng, fan_in, fan_out, shape):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


@dataclass
class LstmParams:
    W: np.ndarray  # (4H, D+H), gate blocks i, f, o, g
    b: np.ndarray  # (4H,)

    @property
    def hidden_dim(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim

    def gate(self, name):
        """(weights, bias) block for gate ``name`` in {'i', 'f', 'o', 'g'}."""
        k = "ifog".index(name)
        H = self.hidden_dim
        return self.W[k * H : (k + 1) * H], self.b[k * H : (k + 1) * H]

    @classmethod
    def init(cls, rng, input_dim, hidden_dim):
        H = hidden_dim
        W = np.concatenate(
            [glorot(rng, input_dim + H, H, (H, input_dim + H)) for _ in range(4)]
        )
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget gate
        return cls(W, b)

    @classmethod
    def zeros(cls, input_dim, hidden_dim):
        return cls(np.zeros((4 * hidden_dim, input_dim + hidden_dim)), np.zeros(4 * hidden_dim))


@dataclass
class ClassifierParams:
    W1: np.ndarray  # (H_mlp, H)
    b1: np.ndarray
    W2: np.ndarray  # (M, H_mlp)
    b2: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.b2.shape[0]

    @classmethod
    def init(cls, rng, hidden_dim, mlp_dim, n_classes):
        return cls(
            glorot(rng, hidden_dim, mlp_dim, (mlp_dim, hidden_dim)),
            np.zeros(mlp_dim),
            glorot(rng, mlp_dim, n_classes, (n_classes, mlp_dim)),
            np.zeros(n_classes),
        )

    @classmethod
    def zeros(cls, hidden_dim, mlp_dim, n_classes):
        return cls(
            np.zeros((mlp_dim, hidden_dim)),
            np.zeros(mlp_dim),
            np.zeros((n_classes, mlp_dim)),
            np.zeros(n_classes),
        )


def lstm_step(params: LstmParams, x, h, c):
    """One LSTM update; returns ``(h', c')``."""
    D, H = params.input_dim, params.hidden_dim
    x, h, c = (np.asarray(a, dtype=np.float64) for a in (x, h, c))
    if x.shape != (D,) or h.shape != (H,) or c.shape != (H,):
        raise ShapeMismatch(
            f"expected x:{D}, h:{H}, c:{H}; got {x.shape}, {h.shape}, {c.shape}"
        )
    z = params.W @ np.concatenate([x, h]) + params.b
    i = sigmoid(z[:H])
    f = sigmoid(z[H : 2 * H])
    o = sigmoid(z[2 * H : 3 * H])
    g = np.tanh(z[3 * H :])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def lstm_forward(params: LstmParams, X, mask):
    """Run the LSTM over a padded batch and return the final hidden states.

    Padded steps carry ``h`` and ``c`` through unchanged, so each row ends on
    the state after its own last token.
    """
    B, T, D = X.shape
    H = params.hidden_dim
    if D != params.input_dim:
        raise DimensionMismatch(f"input dim {D} != LSTM input dim {params.input_dim}")
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    for t in range(T):
        m = mask[:, t][:, None]
        xh = np.concatenate([X[:, t], h], axis=1)
        z = xh @ params.W.T + params.b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        o = sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((xh, c, i, f, o, g, tc, m))
        h = np.where(m > 0, h_new, h)
        c = np.where(m > 0, c_new, c)
    return h, steps


def lstm_backward(params: LstmParams, steps, dh):
    """Backprop through time. Returns ``(dW, db, dX)``."""
    H = params.hidden_dim
    D = params.input_dim
    B = dh.shape[0]
    T = len(steps)
    dW = np.zeros_like(params.W)
    db = np.zeros_like(params.b)
    dX = np.zeros((B, T, D))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        xh, c_prev, i, f, o, g, tc, m = steps[t]
        do = dh * tc
        dct = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dct * g * i * (1.0 - i),
                dct * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dct * i * (1.0 - g * g),
            ],
            axis=1,
        )
        dz *= m
        dW += dz.T @ xh
        db += dz.sum(axis=0)
        dxh = dz @ params.W
        dX[:, t] = dxh[:, :D]
        dh = np.where(m > 0, dxh[:, D:], dh)
        dc = np.where(m > 0, dct * f, dc)
    return dW, db, dX


def embed_tokens(table: EmbeddingTable, tokens) -> np.ndarray:
    return np.stack([table.lookup(t) for t in tokens])


def encode(params: LstmParams, table: EmbeddingTable, tokens) -> np.ndarray:
    """Final hidden state after reading ``tokens`` from a zero state."""
    if table.dimension != params.input_dim:
        raise DimensionMismatch(
            f"embedding dim {table.dimension} != LSTM input dim {params.input_dim}"
        )
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    X = embed_tokens(table, tokens)[None]
    h, _ = lstm_forward(params, X, np.ones((1, len(tokens))))
    return h[0]


def classifier_forward(cls: ClassifierParams, h):
    """Two-layer ReLU MLP + softmax. ``h`` is ``(B, H)``; returns ``(probs, cache)``."""
    if h.shape[-1] != cls.W1.shape[1]:
        raise ShapeMismatch(f"hidden size {h.shape[-1]} != classifier input {cls.W1.shape[1]}")
    a = h @ cls.W1.T + cls.b1
    r = np.maximum(a, 0.0)
    logits = r @ cls.W2.T + cls.b2
    return softmax(logits), (h, a, r)


def classifier_backward(cls: ClassifierParams, cache, dlogits):
    h, a, r = cache
    dW2 = dlogits.T @ r
    db2 = dlogits.sum(axis=0)
    dr = dlogits @ cls.W2
    da = dr * (a > 0)
    dW1 = da.T @ h
    db1 = da.sum(axis=0)
    dh = da @ cls.W1
    return ClassifierParams(dW1, db1, dW2, db2), dh


def classify(cls: ClassifierParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise ShapeMismatch(f"expected a single hidden vector, got shape {h.shape}")
    probs, _ = classifier_forward(cls, h[None])
    return probs[0]


def encoder_gradients(params: LstmParams, cls: ClassifierParams, table: EmbeddingTable, sample):
    """Cross-entropy loss and its gradients for one ``(tokens, label)`` pair.

    Returns ``(loss, lstm_grads, classifier_grads)`` where the gradient objects
    have the same shapes as the parameters.
    """
    tokens, label = sample
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    M = cls.n_classes
    if not 0 <= label < M:
        raise BadLabel(f"label {label} outside [0, {M})")
    if table.dimension != params.input_dim:
        raise DimensionMismatch(
            f"embedding dim {table.dimension} != LSTM input dim {params.input_dim}"
        )
    X = embed_tokens(table, tokens)[None]
    h, steps = lstm_forward(params, X, np.ones((1, len(tokens))))
    probs, cache = classifier_forward(cls, h)
    loss = -np.log(max(probs[0, label], 1e-300))
    dlogits = probs.copy()
    dlogits[0, label] -= 1.0
    cgrads, dh = classifier_backward(cls, cache, dlogits)
    dW, db, _ = lstm_backward(params, steps, dh)
    return float(loss), LstmParams(dW, db), cgrads
