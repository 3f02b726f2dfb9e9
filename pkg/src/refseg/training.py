"""Losses, SGD with momentum, gradient checking, and the training entry points.

``epochs`` counts every pass over the mixed stream. The first
``pretrain_epochs`` of them train each path on its own loss: BCE on p1 for the
baseline path, and for the category path a soft per-cell class cross-entropy on
fully annotated scenes plus the expression classifier's cross-entropy. The
fusion weight stays fixed there. The remaining epochs train BCE of the combined
map over everything including alpha, keeping the two auxiliary terms.

With a single path enabled alpha is pinned and never trained.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import model as mdl
from .data import derive_seed, mix_datasets, regions_to_samples
from .embeddings import EmbeddingTable
from .encoder import (
    ClassifierParams,
    LstmParams,
    classifier_backward,
    classifier_forward,
    encoder_gradients,
    lstm_backward,
    lstm_forward,
    softmax,
    tokenize,
)
from .errors import BadLabel, RefSegError, ShapeMismatch
from .metrics import MetricsReport, evaluate
from .segmentation import (
    CategoryParams,
    ConvParams,
    FusionWeight,
    HeadParams,
    baseline_backward,
    baseline_forward,
    category_backward,
    category_forward,
    combine,
    combine_backward,
    features_backward,
    features_forward,
)

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


# -- losses --------------------------------------------------------------------


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient wrt ``p``.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` before taking logs; the gradient
    is the analytic ``(p - y) / (p (1 - p)) / N`` at the clamped value.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatch(f"prediction {p.shape} and target {y.shape} differ")
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    n = p.size
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n
    grad = (pc - y) / (pc * (1.0 - pc)) / n
    return float(loss), grad


def cross_entropy_loss(dist, label: int):
    """``-log dist[label]`` and the gradient wrt the logits behind ``dist``."""
    dist = np.asarray(dist, dtype=np.float64)
    if not 0 <= label < dist.shape[-1]:
        raise BadLabel(f"label {label} outside [0, {dist.shape[-1]})")
    loss = -np.log(max(dist[label], P_CLAMP))
    grad = dist.copy()
    grad[label] -= 1.0
    return float(loss), grad


def soft_cross_entropy(p, q):
    """Mean over cells of ``-sum_k q log p``; gradient wrt logits is ``(p - q) / N``.

    Only true underflow is floored: a 1e-7 clamp here would flatten the loss
    while the logit gradient kept moving.
    """
    n = int(np.prod(p.shape[:-1]))
    loss = -np.sum(q * np.log(np.maximum(p, 1e-300))) / n
    return float(loss), (p - q) / n


# -- optimiser -------------------------------------------------------------------


def sgd_step(params: dict, grads: dict, lr: float, velocity: dict, momentum: float = 0.9) -> dict:
    """In-place SGD with momentum: ``v <- mu v - lr g; p <- p + v``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v
    return params


def _clip(grads: dict, max_norm):
    if not max_norm:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        grads = {k: g * s for k, g in grads.items()}
    return grads


# -- targets -------------------------------------------------------------------


TARGET_SIGMA = 1.5


def _corner_positions(n_in, n_out):
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def grid_targets(mask, h: int, w: int) -> np.ndarray:
    """Downsample a full-resolution mask to an ``h x w`` grid of soft targets.

    The mask is Gaussian-smoothed (sigma 1.5 px) and sampled bilinearly at the
    pixel positions that ``upsample_bilinear`` maps grid cells to, so a perfect
    grid prediction upsamples back close to the mask.
    """
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    smooth = ndimage.gaussian_filter(mask, TARGET_SIGMA, mode="nearest")
    ys, xs = _corner_positions(H, h), _corner_positions(W, w)
    grid = ndimage.map_coordinates(smooth, np.meshgrid(ys, xs, indexing="ij"), order=1, mode="nearest")
    return np.clip(grid, 0.0, 1.0)


def grid_class_targets(label_map, n_classes: int, h: int, w: int) -> np.ndarray:
    """Per-cell soft class distributions ``(h, w, M)`` from an integer label map."""
    onehot = np.eye(n_classes)[label_map]
    return np.stack([grid_targets(onehot[..., k], h, w) for k in range(n_classes)], axis=-1)


# -- gradient checking ------------------------------------------------------------


def relative_error(a, b, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_arrays(loss_fn, params: dict, grads: dict, step: float = 1e-5, skip_kinks: bool = False,
                 floor: float = 1e-8):
    """Worst relative error between ``grads`` and central differences of ``loss_fn``
    over every component of every array in ``params``.

    With ``skip_kinks`` a component is left out when its own finite difference
    is unstable, i.e. steps ``step`` and ``step / 10`` disagree by more than
    1e-4 relative: the probe straddles a ReLU or max-pool kink, or roundoff
    swamps a tiny gradient. A wrong analytic gradient still shows up because
    the two numeric estimates then agree with each other and not with it.
    Returns ``(worst, skipped)`` in that mode, plain ``worst`` otherwise.
    ``floor`` is the smallest denominator of the relative error.
    """
    worst = 0.0
    skipped = 0

    def central(arr, idx, old, h):
        arr[idx] = old + h
        lp = loss_fn()
        arr[idx] = old - h
        lm = loss_fn()
        arr[idx] = old
        return (lp - lm) / (2 * h)

    for name, arr in params.items():
        g = grads[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            num = central(arr, idx, old, step)
            err = relative_error(num, g[idx], floor)
            if skip_kinks and err >= 1e-4:
                if relative_error(num, central(arr, idx, old, step / 10)) > 1e-4:
                    skipped += 1
                    continue
            worst = max(worst, err)
    return (worst, skipped) if skip_kinks else worst


def _randomize(rng, arrays, scale=0.5):
    for a in arrays:
        a += rng.normal(0.0, scale, a.shape)


def _smooth_worst(result, params, max_skip=0.05) -> float:
    worst, skipped = result
    arrays = params.values() if isinstance(params, dict) else mdl.asdict_shallow(params).values()
    total = sum(a.size for a in arrays)
    return worst if skipped <= max_skip * total else float("inf")


def grad_check(piece: str, seed: int = 0, step: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst relative error of analytic vs central-difference gradients for a
    random small configuration (D = H = 4, M = 3, grid <= 6x6, T <= 5).

    ``piece`` is one of ``encoder`` (LSTM + classifier), ``baseline_head``,
    ``category_head``, ``alpha`` (raw fusion weight), ``backbone``, or ``full``
    (every trainable array of a bundle).

    The last two pass through ReLU and max-pool, so they run ``check_arrays``
    with ``skip_kinks``; more than 5% skipped components counts as failure
    (returns inf). ``floor`` is passed through to the relative error.
    """
    rng = np.random.default_rng(seed)
    D = H = 4
    M = 3
    T = int(rng.integers(1, 6))
    h = int(rng.integers(2, 7))
    w = int(rng.integers(2, 7))

    if piece == "encoder":
        vocab = [f"w{i}" for i in range(6)]
        table = EmbeddingTable(vocab, rng.normal(0, 1, (6, D)))
        lstm = LstmParams.init(rng, D, H)
        cls = ClassifierParams.init(rng, H, 5, M)
        _randomize(rng, [lstm.W, lstm.b, cls.W1, cls.b1, cls.W2, cls.b2])
        tokens = [vocab[i] for i in rng.integers(0, 6, T)]
        label = int(rng.integers(M))
        _, gl, gc = encoder_gradients(lstm, cls, table, (tokens, label))
        params = {"W": lstm.W, "b": lstm.b, "W1": cls.W1, "b1": cls.b1, "W2": cls.W2, "b2": cls.b2}
        grads = {"W": gl.W, "b": gl.b, "W1": gc.W1, "b1": gc.b1, "W2": gc.W2, "b2": gc.b2}
        return check_arrays(
            lambda: encoder_gradients(lstm, cls, table, (tokens, label))[0], params, grads, step, floor=floor
        )

    if piece == "baseline_head":
        C = 3
        F = rng.normal(0, 1, (2, h, w, C + 2))
        e = rng.normal(0, 1, (2, H))
        head = HeadParams.init(rng, H, C + 2, 5)
        _randomize(rng, [head.U, head.bu, head.v, head.bv])
        y = (rng.random((2, h, w)) < 0.5).astype(float)

        def loss():
            p, cache = baseline_forward(head, F, e)
            return bce_loss(p, y)[0]

        p, cache = baseline_forward(head, F, e)
        _, dp = bce_loss(p, y)
        g, _, _ = baseline_backward(head, cache, dp * p * (1 - p))
        params = mdl.asdict_shallow(head)
        return check_arrays(loss, params, mdl.asdict_shallow(g), step, floor=floor)

    if piece == "category_head":
        C = 3
        F = rng.normal(0, 1, (2, h, w, C + 2))
        cat = CategoryParams.init(rng, C + 2, 5, M)
        _randomize(rng, [cat.A, cat.ba, cat.B, cat.bb])
        q = softmax(rng.normal(0, 1, (2, h, w, M)))

        def loss():
            return soft_cross_entropy(category_forward(cat, F)[0], q)[0]

        p, cache = category_forward(cat, F)
        g, _ = category_backward(cat, cache, soft_cross_entropy(p, q)[1])
        return check_arrays(loss, mdl.asdict_shallow(cat), mdl.asdict_shallow(g), step, floor=floor)

    if piece == "alpha":
        fusion = FusionWeight(float(rng.normal(0, 2)))
        p1 = rng.uniform(0.05, 0.95, (2, h, w))
        p2 = rng.uniform(0.05, 0.95, (2, h, w))
        y = rng.random((2, h, w))

        def loss():
            return bce_loss(combine(p1, p2, fusion), y)[0]

        _, dp = bce_loss(combine(p1, p2, fusion), y)
        _, _, da = combine_backward(p1, p2, fusion, dp)
        raw = np.array([fusion.raw])

        def loss_at():
            fusion.raw = float(raw[0])
            return loss()

        return check_arrays(loss_at, {"raw": raw}, {"raw": np.array([da])}, step, floor=floor)

    if piece == "backbone":
        conv = ConvParams.init(rng, 3, 3)
        _randomize(rng, [conv.W1, conv.b1, conv.W2, conv.b2], 0.3)
        imgs = rng.random((2, 4 * h, 4 * w, 3))
        wts = rng.normal(0, 1, (2, h, w, 5))

        def loss():
            F, _ = features_forward(conv, imgs)
            return float(np.sum(np.tanh(F) * wts))

        F, cache = features_forward(conv, imgs)
        g = features_backward(conv, cache, (1 - np.tanh(F) ** 2) * wts)
        res = check_arrays(loss, mdl.asdict_shallow(conv), mdl.asdict_shallow(g), step, True, floor)
        return _smooth_worst(res, conv)

    if piece == "full":
        dims = mdl.ModelDims(
            embedding_dim=D, hidden=H, mlp_hidden=5, head_hidden=5,
            category_hidden=5, conv1=3, conv2=3, n_classes=M,
        )
        model = mdl.ModelBundle.init(rng, dims, vocab=["a", "b", "c", "d"])
        _randomize(rng, list(model.parameters().values()), 0.3)
        model.alpha_raw[0] = rng.normal()
        B = 2
        imgs = rng.random((B, 4 * h, 4 * w, 3))
        exprs = [" ".join(rng.choice(["a", "b", "c", "d", "zz"], size=int(rng.integers(1, T + 1)))) for _ in range(B)]
        ids, mask = model.batch_ids(exprs)
        y = rng.random((B, h, w))
        labels = rng.integers(0, M, B)

        def full_loss(out):
            L, dp = bce_loss(out["p"], y)
            pt = out["ptext"]
            L += -np.mean(np.log(pt[np.arange(B), labels]))
            dt = pt.copy()
            dt[np.arange(B), labels] -= 1.0
            return L, dp, dt / B

        out = mdl.forward(model, imgs, ids, mask)
        _, dp, dt = full_loss(out)
        grads = mdl.backward(model, out, dp, dtext_logits=dt)
        params = model.parameters()
        res = check_arrays(lambda: full_loss(mdl.forward(model, imgs, ids, mask))[0], params, grads, step, True, floor)
        return _smooth_worst(res, params)

    raise ValueError(f"unknown piece {piece!r}")


GRAD_CHECK_PIECES = ("encoder", "baseline_head", "category_head", "alpha", "backbone", "full")


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 20
    pretrain_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    mix_ratio: float = 0.5
    pretrained_embedding: bool = True
    synthesized_expressions: bool = True
    category_path: bool = True
    baseline_path: bool = True
    cls_weight: float = 1.0
    pixel_weight: float = 1.0
    referring_fraction: float = 1.0
    clip_norm: float = 0.0
    embedding_dim: int = 50
    hidden: int = 64
    mlp_hidden: int = 64
    head_hidden: int = 64
    category_hidden: int = 32
    conv1: int = 16
    conv2: int = 16

    def __post_init__(self):
        if not self.lr > 0:
            raise RefSegError("learning rate must be positive")
        if self.epochs < 1:
            raise RefSegError("epochs must be at least 1")
        if not (self.baseline_path or self.category_path):
            raise RefSegError("at least one of baseline_path / category_path must be on")
        if not 0.0 < self.referring_fraction <= 1.0:
            raise RefSegError("referring_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise RefSegError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dims(self, n_classes: int, foreground_prior: float = 0.5) -> mdl.ModelDims:
        return mdl.ModelDims(
            foreground_prior=foreground_prior,
            embedding_dim=self.embedding_dim, hidden=self.hidden, mlp_hidden=self.mlp_hidden,
            head_hidden=self.head_hidden, category_hidden=self.category_hidden,
            conv1=self.conv1, conv2=self.conv2, n_classes=n_classes,
        )


# Settings used for the shape-world benchmark and the ablation table. The
# TrainConfig defaults stay small and generic; these are what reach the
# reported numbers on one core.
BENCHMARK_PRESET = {"lr": 0.1, "epochs": 80, "pretrain_epochs": 50, "mix_ratio": 0.25, "clip_norm": 5.0,
                    "conv1": 32, "conv2": 32}


@dataclass
class TrainData:
    """Referring samples, fully annotated scenes, optional validation samples."""

    catalog: object
    referring: list
    vision: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    vectors: EmbeddingTable | None = None


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_overall_iou: list = field(default_factory=list)
    alpha: list = field(default_factory=list)

    def json_lines(self) -> str:
        rows = []
        for i, (l, v, a) in enumerate(zip(self.loss, self.val_overall_iou, self.alpha), start=1):
            rows.append(json.dumps({"epoch": i, "loss": l, "val_overall_iou": v, "alpha": a}))
        return "".join(r + "\n" for r in rows)


# -- training -------------------------------------------------------------------


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def pixel_grads(model, scenes, weight=1.0):
    """Per-cell class cross-entropy of the category head on annotated scenes.

    Returns ``(loss, grads)`` for the backbone and category head.
    """
    imgs = np.stack([s.image for s in scenes])
    F, fcache = features_forward(model.cat_conv, imgs)
    h, w = F.shape[1:3]
    M = model.dims.n_classes
    q = np.stack([grid_class_targets(s.label_map(), M, h, w) for s in scenes])
    pmap, ccache = category_forward(model.category, F)
    loss, dl = soft_cross_entropy(pmap, q)
    cg, dF = category_backward(model.category, ccache, dl * weight)
    grads = {"category." + k: v for k, v in mdl.asdict_shallow(cg).items()}
    for k, v in mdl.asdict_shallow(features_backward(model.cat_conv, fcache, dF)).items():
        grads["cat_conv." + k] = v
    return weight * loss, grads


def _add(into: dict, more: dict):
    for k, v in more.items():
        into[k] = into[k] + v if k in into else v


_TARGET_CACHE = {}


def _cached_targets(sample, h, w):
    key = (id(sample.gt_mask), h, w)
    hit = _TARGET_CACHE.get(key)
    if hit is None or hit[0] is not sample.gt_mask:
        hit = _TARGET_CACHE[key] = (sample.gt_mask, grid_targets(sample.gt_mask, h, w))
    return hit[1]


def joint_step(model, batch, config, velocity, path_override=None, joint=True, scenes=None):
    """One SGD step on a batch of samples. Returns the batch loss.

    With ``joint`` the loss is BCE of the combined map and the fusion weight is
    trained; otherwise the baseline map gets its own BCE and alpha is left
    alone. Classifier cross-entropy is added on labelled samples, and per-cell
    class cross-entropy on ``scenes`` when given.
    """
    imgs = np.stack([s.image for s in batch])
    ids, mask = model.batch_ids([s.expression for s in batch])
    out = mdl.forward(model, imgs, ids, mask)
    h, w = out["grid"]
    y = np.stack([_cached_targets(s, h, w) for s in batch])
    if path_override is not None:
        p1, p2 = path_override(batch, out, y)
        loss, dp = bce_loss(model.fusion.alpha * p1 + (1.0 - model.fusion.alpha) * p2, y)
        a = model.alpha
        grads = {"alpha_raw": np.array([np.sum(dp * (p1 - p2)) * a * (1 - a)])}
        params = {"alpha_raw": model.parameters()["alpha_raw"]}
        sgd_step(params, _clip(grads, config.clip_norm), config.lr, velocity, config.momentum)
        return loss

    dp = dp1 = None
    loss = 0.0
    if joint:
        loss, dp = bce_loss(out["p"], y)
    elif model.use_baseline:
        loss, dp1 = bce_loss(out["p1"], y)
    dt = None
    if model.use_category and config.cls_weight:
        lab = [(i, s.class_label) for i, s in enumerate(batch) if s.class_label is not None]
        if lab:
            rows = np.array([i for i, _ in lab])
            labels = np.array([c for _, c in lab])
            pt = out["ptext"]
            dt = np.zeros_like(pt)
            dt[rows] = pt[rows]
            dt[rows, labels] -= 1.0
            dt *= config.cls_weight / len(batch)
            loss += config.cls_weight * float(
                -np.sum(np.log(np.maximum(pt[rows, labels], P_CLAMP))) / len(batch)
            )
    grads = mdl.backward(model, out, dp, dp1=dp1, dtext_logits=dt)
    if not joint:
        grads.pop("alpha_raw", None)
    if scenes:
        pl, pg = pixel_grads(model, scenes, config.pixel_weight)
        loss += pl
        _add(grads, pg)
    grads = _clip(grads, config.clip_norm)
    sgd_step(model.parameters(), grads, config.lr, velocity, config.momentum)
    return loss


def build_model(config: TrainConfig, data: TrainData, vocab_samples, rng) -> mdl.ModelBundle:
    fg = float(np.mean([s.gt_mask.mean() for s in vocab_samples]))
    dims = config.dims(data.catalog.size, min(max(fg, 0.01), 0.99))
    kwargs = dict(
        use_baseline=config.baseline_path,
        use_category=config.category_path,
        class_names=list(data.catalog.names),
    )
    if config.pretrained_embedding:
        if data.vectors is None:
            raise RefSegError("pretrained_embedding is on but no word vectors were given")
        return mdl.ModelBundle.init(rng, dims, table=data.vectors, **kwargs)
    vocab = sorted({t for s in vocab_samples for t in tokenize(s.expression)})
    return mdl.ModelBundle.init(rng, dims, vocab=vocab, **kwargs)


def training_streams(config: TrainConfig, data: TrainData):
    """Referring samples (after subsampling) and class-name samples in use."""
    rng = np.random.default_rng(derive_seed(config.seed, 101))
    referring = list(data.referring)
    if config.referring_fraction < 1.0:
        k = max(1, int(round(config.referring_fraction * len(referring))))
        keep = np.sort(rng.permutation(len(referring))[:k])
        referring = [referring[i] for i in keep]
    synthesized = []
    if config.synthesized_expressions:
        synthesized = regions_to_samples(data.vision, data.catalog)
    return referring, synthesized


def train_full(config: TrainConfig, data: TrainData, path_override=None):
    """Train a bundle according to ``config``; returns ``(model, TrainHistory)``.

    ``path_override(batch, out, y) -> (p1, p2)`` replaces both path outputs by
    caller-supplied maps; only the fusion weight is then trained.
    """
    if not data.referring:
        raise RefSegError("no referring training samples")
    if not data.catalog:
        raise RefSegError("a class catalog is required")
    has_labels = any(s.class_label is not None for s in data.referring)
    if config.category_path and not has_labels and not data.vision:
        log.warning("no class labels in the data: category path disabled")
        config = TrainConfig(**{**config.to_dict(), "category_path": False, "baseline_path": True})
    referring, synthesized = training_streams(config, data)
    rng = np.random.default_rng(derive_seed(config.seed, 102))
    model = build_model(config, data, referring + synthesized, rng)
    emb_before = model.embedding.copy() if not model.embedding_trainable else None
    history = TrainHistory()

    scenes = list(data.vision) if model.use_category and config.pixel_weight else []
    velocity = {}
    for epoch in range(config.epochs):
        joint = path_override is not None or epoch >= config.pretrain_epochs
        stream = mix_datasets(
            referring, synthesized, config.mix_ratio if synthesized else 0.0,
            seed=derive_seed(config.seed, 103, epoch),
        )
        order = rng.permutation(len(scenes)) if scenes else []
        losses = []
        for i, batch in enumerate(_batches(stream, config.batch_size)):
            vb = [scenes[order[(i * config.batch_size + j) % len(scenes)]]
                  for j in range(config.batch_size)] if scenes else None
            losses.append(joint_step(model, batch, config, velocity, path_override, joint, vb))
        history.loss.append(float(np.mean(losses)))
        history.alpha.append(model.alpha)
        if data.validation and path_override is None:
            history.val_overall_iou.append(evaluate_model(model, data.validation).overall_iou)
        else:
            history.val_overall_iou.append(None)
        log.info(
            "epoch %d%s loss %.4f alpha %.3f val %s", epoch + 1, "" if joint else " (paths)",
            history.loss[-1], history.alpha[-1], history.val_overall_iou[-1],
        )
    if emb_before is not None and not np.array_equal(emb_before, model.embedding):
        raise AssertionError("fixed embedding rows changed during training")
    return model, history


def _embed_batch(table: EmbeddingTable, expressions):
    toks = [tokenize(e) for e in expressions]
    T = max(len(t) for t in toks)
    X = np.zeros((len(toks), T, table.dimension))
    mask = np.zeros((len(toks), T))
    for i, t in enumerate(toks):
        if t:
            X[i, : len(t)] = np.stack([table.lookup(w) for w in t])
            mask[i, : len(t)] = 1.0
    return X, mask


def train_classifier(config: TrainConfig, samples, table: EmbeddingTable, n_classes: int):
    """Expression -> class training on its own (fixed word vectors).

    ``samples`` are ``(expression, label)`` pairs. Returns ``(lstm, classifier,
    losses)`` with one mean loss per epoch.
    """
    samples = list(samples)
    if not samples:
        raise RefSegError("no labelled expressions")
    for _, label in samples:
        if not 0 <= label < n_classes:
            raise BadLabel(f"label {label} outside [0, {n_classes})")
    rng = np.random.default_rng(derive_seed(config.seed, 201))
    lstm = LstmParams.init(rng, table.dimension, config.hidden)
    cls = ClassifierParams.init(rng, config.hidden, config.mlp_hidden, n_classes)
    params = {"W": lstm.W, "b": lstm.b, "W1": cls.W1, "b1": cls.b1, "W2": cls.W2, "b2": cls.b2}
    velocity = {}
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for idx in _batches(order, config.batch_size):
            exprs = [samples[i][0] for i in idx]
            labels = np.array([samples[i][1] for i in idx])
            X, mask = _embed_batch(table, exprs)
            h, steps = lstm_forward(lstm, X, mask)
            probs, cache = classifier_forward(cls, h)
            B = len(idx)
            total += float(-np.sum(np.log(np.maximum(probs[np.arange(B), labels], P_CLAMP))))
            dl = probs.copy()
            dl[np.arange(B), labels] -= 1.0
            cg, dh = classifier_backward(cls, cache, dl / B)
            dW, db, _ = lstm_backward(lstm, steps, dh)
            grads = {"W": dW, "b": db, **mdl.asdict_shallow(cg)}
            sgd_step(params, _clip(grads, config.clip_norm), config.lr, velocity, config.momentum)
        losses.append(total / len(samples))
    return lstm, cls, losses


def classifier_accuracy(lstm: LstmParams, cls: ClassifierParams, table: EmbeddingTable, samples) -> float:
    """Fraction of ``(expression, label)`` pairs whose argmax class is right."""
    samples = list(samples)
    X, mask = _embed_batch(table, [e for e, _ in samples])
    h, _ = lstm_forward(lstm, X, mask)
    probs, _ = classifier_forward(cls, h)
    return float(np.mean(np.argmax(probs, axis=1) == np.array([l for _, l in samples])))


def evaluate_model(model, samples, jobs: int = 1, threshold: float = 0.5) -> MetricsReport:
    return evaluate(lambda img, expr: mdl.predict(model, img, expr, threshold)[1], samples, jobs=jobs)


# -- ablations -------------------------------------------------------------------

ABLATION_ROWS = (
    ("baseline LSTM-CNN", dict(pretrained_embedding=False, synthesized_expressions=False,
                               category_path=False, baseline_path=True)),
    ("ours (with word embedding)", dict(pretrained_embedding=True, synthesized_expressions=False,
                                         category_path=False, baseline_path=True)),
    ("ours (emb + synthesized)", dict(pretrained_embedding=True, synthesized_expressions=True,
                                       category_path=False, baseline_path=True)),
    ("ours (category-based only)", dict(pretrained_embedding=True, synthesized_expressions=True,
                                         category_path=True, baseline_path=False)),
    ("ours (full model)", dict(pretrained_embedding=True, synthesized_expressions=True,
                                category_path=True, baseline_path=True)),
)


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    toggles = dict(ABLATION_ROWS)[row]
    return TrainConfig(**{**base.to_dict(), **toggles})


def ablation_runs(base: TrainConfig, data: TrainData, test, seeds=None, rows=None, jobs: int = 1):
    """Train and evaluate every ablation row for each seed.

    Returns ``{row_label: [MetricsReport per seed]}`` in table order.
    """
    seeds = [base.seed] if seeds is None else list(seeds)
    rows = [r for r, _ in ABLATION_ROWS] if rows is None else list(rows)
    out = {}
    for row in rows:
        reports = []
        for s in seeds:
            cfg = ablation_config(TrainConfig(**{**base.to_dict(), "seed": s}), row)
            model, _ = train_full(cfg, data)
            reports.append(evaluate_model(model, test, jobs=jobs))
        out[row] = reports
    return out


def median_report(reports) -> MetricsReport:
    """Componentwise median of several reports."""
    return MetricsReport(
        n=reports[0].n,
        prec={t: float(np.median([r.prec[t] for r in reports])) for t in reports[0].prec},
        overall_iou=float(np.median([r.overall_iou for r in reports])),
    )
