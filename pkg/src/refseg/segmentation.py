"""Image side: feature extractor, the two per-cell heads, and map fusion.

Arrays are channel-last throughout: images ``(H, W, 3)``, feature maps
``(h, w, C + 2)``, probability maps ``(h, w, M)``, foreground maps ``(h, w)``.
The batched ``*_forward`` / ``*_backward`` pairs add a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import glorot, sigmoid, softmax
from .errors import BadThreshold, ClassCountMismatch, ShapeMismatch


@dataclass
class ConvParams:
    W1: np.ndarray  # (3, 3, 3, C1)
    b1: np.ndarray
    W2: np.ndarray  # (3, 3, C1, C2)
    b2: np.ndarray

    @property
    def channels(self) -> int:
        return self.b2.shape[0]

    @classmethod
    def init(cls, rng, c1, c2):
        return cls(
            glorot(rng, 9 * 3, 9 * c1, (3, 3, 3, c1)),
            np.zeros(c1),
            glorot(rng, 9 * c1, 9 * c2, (3, 3, c1, c2)),
            np.zeros(c2),
        )


@dataclass
class HeadParams:
    """Baseline head: 1x1 ReLU layer over ``[expression; cell features]``, then a logit."""

    U: np.ndarray  # (Hh, H + C + 2), expression columns first
    bu: np.ndarray
    v: np.ndarray  # (Hh,)
    bv: np.ndarray  # (1,)

    @classmethod
    def init(cls, rng, expr_dim, feat_dim, hidden, prior=0.5):
        """``prior`` sets the initial output bias to ``logit(prior)``."""
        return cls(
            glorot(rng, expr_dim + feat_dim, hidden, (hidden, expr_dim + feat_dim)),
            np.zeros(hidden),
            glorot(rng, hidden, 1, (hidden,)),
            np.array([np.log(prior / (1.0 - prior))]),
        )


@dataclass
class CategoryParams:
    """Category head: 1x1 ReLU layer then 1x1 layer to M logits."""

    A: np.ndarray  # (Hc, C + 2)
    ba: np.ndarray
    B: np.ndarray  # (M, Hc)
    bb: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.bb.shape[0]

    @classmethod
    def init(cls, rng, feat_dim, hidden, n_classes):
        return cls(
            glorot(rng, feat_dim, hidden, (hidden, feat_dim)),
            np.zeros(hidden),
            glorot(rng, hidden, n_classes, (n_classes, hidden)),
            np.zeros(n_classes),
        )


@dataclass
class FusionWeight:
    """Scalar mixing weight ``alpha = sigmoid(raw)``.

    ``forced`` pins alpha to an exact value (0.0 or 1.0) so that a single path
    can be run through the same code with no rounding from the other one.
    """

    raw: float = 0.0
    forced: float | None = None

    @property
    def alpha(self) -> float:
        if self.forced is not None:
            return float(self.forced)
        return float(sigmoid(np.array(self.raw)))


# -- convolution -----------------------------------------------------------


def conv_forward(X, W, b):
    """3x3 convolution, stride 2, zero padding 1. ``X`` is ``(B, H, W, Cin)``.

    Returns the output and the im2col matrix ``(B*oh*ow, 9*Cin)`` for backward.
    """
    B, H, Wd, cin = X.shape
    oh, ow = (H + 1) // 2, (Wd + 1) // 2
    Xp = np.pad(X, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [
            Xp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2, :]
            for ki in range(3)
            for kj in range(3)
        ],
        axis=-1,
    ).reshape(-1, 9 * cin)
    out = cols @ W.reshape(9 * cin, -1) + b
    return out.reshape(B, oh, ow, -1), (cols, X.shape)


def conv_backward(cache, W, dout, input_grad=True):
    cols, xshape = cache
    B, H, Wd, cin = xshape
    _, oh, ow, cout = dout.shape
    flat = dout.reshape(-1, cout)
    dW = (cols.T @ flat).reshape(W.shape)
    db = flat.sum(axis=0)
    if not input_grad:
        return dW, db, None
    dcols = (flat @ W.reshape(9 * cin, cout).T).reshape(B, oh, ow, 9, cin)
    dXp = np.zeros((B, H + 2, Wd + 2, cin))
    for k in range(9):
        ki, kj = divmod(k, 3)
        dXp[:, ki : ki + 2 * oh - 1 : 2, kj : kj + 2 * ow - 1 : 2, :] += dcols[:, :, :, k, :]
    return dW, db, dXp[:, 1:-1, 1:-1, :]


def coordinate_channels(h, w):
    """``(h, w, 2)`` cell-centre coordinates ``x, y`` in ``[-1, 1]``."""
    xs = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    ys = -1.0 + (2.0 * np.arange(h) + 1.0) / h
    return np.stack(np.broadcast_arrays(xs[None, :], ys[:, None]), axis=-1)


def features_forward(conv: ConvParams, images):
    if images.ndim != 4 or images.shape[-1] != 3 or conv.W1.shape[2] != 3:
        raise ShapeMismatch(f"expected (B, H, W, 3) images, got {images.shape}")
    a1, c1 = conv_forward(images - 0.5, conv.W1, conv.b1)
    r1 = np.maximum(a1, 0.0)
    a2, c2 = conv_forward(r1, conv.W2, conv.b2)
    r2 = np.maximum(a2, 0.0)
    B, h, w, _ = r2.shape
    coords = np.broadcast_to(coordinate_channels(h, w), (B, h, w, 2))
    F = np.concatenate([r2, coords], axis=-1)
    return F, (c1, a1, c2, a2)


def features_backward(conv: ConvParams, cache, dF):
    c1, a1, c2, a2 = cache
    da2 = dF[..., : conv.channels] * (a2 > 0)
    dW2, db2, dr1 = conv_backward(c2, conv.W2, da2)
    da1 = dr1 * (a1 > 0)
    dW1, db1, _ = conv_backward(c1, conv.W1, da1, input_grad=False)
    return ConvParams(dW1, db1, dW2, db2)


def extract_features(image, conv: ConvParams) -> np.ndarray:
    """Two stride-2 3x3 ReLU convolutions plus appended x/y coordinate channels.

    Pixels are centred (``image - 0.5``) before the first convolution. The grid
    is ``ceil(H/4) x ceil(W/4)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {image.shape}")
    F, _ = features_forward(conv, image[None])
    return F[0]


# -- heads -------------------------------------------------------------------


def baseline_forward(head: HeadParams, F, e):
    """Per-cell foreground logits ``(B, h, w)`` and their sigmoid."""
    H = e.shape[-1]
    if head.U.shape[1] != H + F.shape[-1]:
        raise ShapeMismatch(
            f"head expects {head.U.shape[1]} inputs, got {H} + {F.shape[-1]}"
        )
    Ue, Uf = head.U[:, :H], head.U[:, H:]
    pre = F @ Uf.T + (e @ Ue.T)[:, None, None, :] + head.bu
    r = np.maximum(pre, 0.0)
    logit = r @ head.v + head.bv[0]
    return sigmoid(logit), (F, e, pre, r)


def baseline_backward(head: HeadParams, cache, dlogit):
    F, e, pre, r = cache
    H = e.shape[-1]
    Ue, Uf = head.U[:, :H], head.U[:, H:]
    dv = np.tensordot(dlogit, r, axes=([0, 1, 2], [0, 1, 2]))
    dbv = np.array([dlogit.sum()])
    dpre = dlogit[..., None] * head.v * (pre > 0)
    flat = dpre.reshape(-1, dpre.shape[-1])
    dUf = flat.T @ F.reshape(-1, F.shape[-1])
    dsum = dpre.sum(axis=(1, 2))
    dUe = dsum.T @ e
    dbu = flat.sum(axis=0)
    dF = dpre @ Uf
    de = dsum @ Ue
    return HeadParams(np.concatenate([dUe, dUf], axis=1), dbu, dv, dbv), dF, de


def baseline_head(fmap, expr, head: HeadParams) -> np.ndarray:
    """Foreground probability per cell from features and an encoded expression."""
    fmap = np.asarray(fmap, dtype=np.float64)
    expr = np.asarray(expr, dtype=np.float64)
    if fmap.ndim != 3 or expr.ndim != 1:
        raise ShapeMismatch(f"expected (h, w, C) map and a vector, got {fmap.shape}, {expr.shape}")
    p, _ = baseline_forward(head, fmap[None], expr[None])
    return p[0]


def category_forward(cat: CategoryParams, F):
    if cat.A.shape[1] != F.shape[-1]:
        raise ShapeMismatch(f"category head expects {cat.A.shape[1]} channels, got {F.shape[-1]}")
    pre = F @ cat.A.T + cat.ba
    r = np.maximum(pre, 0.0)
    logits = r @ cat.B.T + cat.bb
    return softmax(logits), (F, pre, r)


def category_backward(cat: CategoryParams, cache, dlogits):
    F, pre, r = cache
    fl = dlogits.reshape(-1, dlogits.shape[-1])
    dB = fl.T @ r.reshape(-1, r.shape[-1])
    dbb = fl.sum(axis=0)
    dpre = (dlogits @ cat.B) * (pre > 0)
    fp = dpre.reshape(-1, dpre.shape[-1])
    dA = fp.T @ F.reshape(-1, F.shape[-1])
    dba = fp.sum(axis=0)
    dF = dpre @ cat.A
    return CategoryParams(dA, dba, dB, dbb), dF


def category_head(fmap, cat: CategoryParams) -> np.ndarray:
    """Per-cell class distribution ``(h, w, M)``."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ShapeMismatch(f"expected (h, w, C) map, got {fmap.shape}")
    p, _ = category_forward(cat, fmap[None])
    return p[0]


def softmax_backward(p, dp):
    """Gradient wrt logits given the softmax output ``p`` and ``dL/dp``."""
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


# -- fusion ----------------------------------------------------------------


def fuse(pmap, ptext) -> np.ndarray:
    """Foreground map as the per-cell inner product of image and text class distributions."""
    pmap = np.asarray(pmap, dtype=np.float64)
    ptext = np.asarray(ptext, dtype=np.float64)
    if pmap.shape[-1] != ptext.shape[-1]:
        raise ClassCountMismatch(
            f"map has {pmap.shape[-1]} classes, text distribution has {ptext.shape[-1]}"
        )
    if ptext.ndim == 1:
        return pmap @ ptext
    return np.einsum("bhwk,bk->bhw", pmap, ptext)


def combine(p1, p2, weight: FusionWeight) -> np.ndarray:
    """``alpha * p1 + (1 - alpha) * p2`` cellwise."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ShapeMismatch(f"maps differ in shape: {p1.shape} vs {p2.shape}")
    a = weight.alpha
    return a * p1 + (1.0 - a) * p2


def combine_backward(p1, p2, weight: FusionWeight, dp):
    """Gradients of :func:`combine` wrt ``p1``, ``p2`` and the raw weight.
    A forced weight has zero raw gradient."""
    a = weight.alpha
    if weight.forced is not None:
        draw = 0.0
    else:
        draw = float(np.sum(dp * (p1 - p2))) * a * (1.0 - a)
    return a * dp, (1.0 - a) * dp, draw


def upsample_bilinear(fmap, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``(h, w)`` map to ``(height, width)``."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 2 or min(fmap.shape) < 1:
        raise ShapeMismatch(f"expected a non-empty 2-D map, got {fmap.shape}")

    def axis_weights(n_in, n_out):
        if n_in == 1 or n_out == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        t = src - lo
        return lo, hi, t

    ylo, yhi, ty = axis_weights(fmap.shape[0], height)
    xlo, xhi, tx = axis_weights(fmap.shape[1], width)
    # lo + (hi - lo) * t keeps constant regions exactly constant
    rows = fmap[ylo] + (fmap[yhi] - fmap[ylo]) * ty[:, None]
    out = rows[:, xlo] + (rows[:, xhi] - rows[:, xlo]) * tx[None, :]
    return np.clip(out, 0.0, 1.0)


def binarize(fmap, threshold: float = 0.5) -> np.ndarray:
    """1 where the value is at least ``threshold``; ties count as foreground."""
    if not 0.0 < threshold < 1.0:
        raise BadThreshold(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(fmap) >= threshold).astype(np.uint8)
