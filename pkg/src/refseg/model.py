"""The full parameter bundle, its batched forward/backward pass, and checkpoints.

A bundle holds a word-embedding matrix (fixed when it comes from a pretrained
table, trainable otherwise) and two paths, each with its own convolutional
backbone:

* baseline path: ``conv`` features + segmentation LSTM -> baseline head -> ``p1``
* category path: classifier LSTM + MLP -> ``p_text``; ``cat_conv`` features +
  category head -> ``p_image``; ``p2 = <p_image, p_text>`` per cell

combined as ``p = alpha * p1 + (1 - alpha) * p2``. When only one path is enabled
alpha is pinned to exactly 1 or 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable
from .encoder import (
    ClassifierParams,
    LstmParams,
    classifier_backward,
    classifier_forward,
    lstm_backward,
    lstm_forward,
    tokenize,
)
from .errors import DimensionMismatch, FormatError, ShapeMismatch
from .segmentation import (
    CategoryParams,
    ConvParams,
    FusionWeight,
    HeadParams,
    baseline_backward,
    baseline_forward,
    binarize,
    category_backward,
    category_forward,
    combine,
    combine_backward,
    features_backward,
    features_forward,
    fuse,
    softmax_backward,
    upsample_bilinear,
)

MAGIC = b"REFSEG-CKPT"
FORMAT_VERSION = 1


@dataclass
class ModelDims:
    embedding_dim: int = 50
    hidden: int = 64  # LSTM state size H
    mlp_hidden: int = 64  # classifier hidden layer H_mlp
    head_hidden: int = 64
    category_hidden: int = 32
    conv1: int = 16
    conv2: int = 16
    n_classes: int = 9  # M, background included
    foreground_prior: float = 0.5  # initial mean output of the baseline head


@dataclass
class ModelBundle:
    dims: ModelDims
    vocab: list  # embedding rows; row len(vocab) is the OOV row
    embedding: np.ndarray  # (V + 1, D)
    embedding_trainable: bool
    conv: ConvParams
    seg_lstm: LstmParams
    head: HeadParams
    cls_lstm: LstmParams
    classifier: ClassifierParams
    category: CategoryParams
    cat_conv: ConvParams
    alpha_raw: np.ndarray = field(default_factory=lambda: np.zeros(1))
    use_baseline: bool = True
    use_category: bool = True
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.vocab)}

    @classmethod
    def init(
        cls,
        rng,
        dims: ModelDims,
        *,
        table: EmbeddingTable | None = None,
        vocab=None,
        use_baseline=True,
        use_category=True,
        class_names=(),
    ):
        """Fresh parameters. Pass ``table`` for fixed pretrained embeddings, or
        ``vocab`` for a randomly initialised trainable embedding matrix."""
        D = dims.embedding_dim
        if table is not None:
            if table.dimension != D:
                raise DimensionMismatch(f"table dim {table.dimension} != configured {D}")
            vocab = list(table.tokens)
            embedding = table.matrix_with_fallback()
            trainable = False
        else:
            vocab = sorted(set(vocab or ()))
            embedding = rng.normal(0.0, 1.0 / np.sqrt(D), size=(len(vocab) + 1, D))
            trainable = True
        feat = dims.conv2 + 2
        return cls(
            dims=dims,
            vocab=vocab,
            embedding=embedding,
            embedding_trainable=trainable,
            conv=ConvParams.init(rng, dims.conv1, dims.conv2),
            seg_lstm=LstmParams.init(rng, D, dims.hidden),
            head=HeadParams.init(rng, dims.hidden, feat, dims.head_hidden, dims.foreground_prior),
            cls_lstm=LstmParams.init(rng, D, dims.hidden),
            classifier=ClassifierParams.init(rng, dims.hidden, dims.mlp_hidden, dims.n_classes),
            category=CategoryParams.init(rng, feat, dims.category_hidden, dims.n_classes),
            cat_conv=ConvParams.init(rng, dims.conv1, dims.conv2),
            alpha_raw=np.zeros(1),
            use_baseline=use_baseline,
            use_category=use_category,
            class_names=list(class_names),
        )

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict:
        """Trainable arrays by name. Arrays are the live objects, so in-place
        updates change the model."""
        p = {}
        if self.embedding_trainable:
            p["embedding"] = self.embedding
        if self.use_baseline:
            for k, v in asdict_shallow(self.conv).items():
                p["conv." + k] = v
            p["seg_lstm.W"] = self.seg_lstm.W
            p["seg_lstm.b"] = self.seg_lstm.b
            for k, v in asdict_shallow(self.head).items():
                p["head." + k] = v
        if self.use_category:
            p["cls_lstm.W"] = self.cls_lstm.W
            p["cls_lstm.b"] = self.cls_lstm.b
            for k, v in asdict_shallow(self.classifier).items():
                p["classifier." + k] = v
            for k, v in asdict_shallow(self.category).items():
                p["category." + k] = v
            for k, v in asdict_shallow(self.cat_conv).items():
                p["cat_conv." + k] = v
        if self.use_baseline and self.use_category:
            p["alpha_raw"] = self.alpha_raw
        return p

    def all_arrays(self) -> dict:
        """Every stored array (trainable or not), in checkpoint order."""
        out = {"embedding": self.embedding}
        for prefix, obj in (
            ("conv", self.conv),
            ("seg_lstm", self.seg_lstm),
            ("head", self.head),
            ("cls_lstm", self.cls_lstm),
            ("classifier", self.classifier),
            ("category", self.category),
            ("cat_conv", self.cat_conv),
        ):
            for k, v in asdict_shallow(obj).items():
                out[f"{prefix}.{k}"] = v
        out["alpha_raw"] = self.alpha_raw
        return out

    @property
    def fusion(self) -> FusionWeight:
        if not self.use_category:
            return FusionWeight(float(self.alpha_raw[0]), forced=1.0)
        if not self.use_baseline:
            return FusionWeight(float(self.alpha_raw[0]), forced=0.0)
        return FusionWeight(float(self.alpha_raw[0]))

    @property
    def alpha(self) -> float:
        return self.fusion.alpha

    def token_ids(self, tokens) -> list:
        oov = len(self.vocab)
        return [self._index.get(t, oov) for t in tokens]

    def batch_ids(self, expressions):
        """Token ids ``(B, T)`` and mask for a list of expressions (strings or token lists)."""
        seqs = [self.token_ids(tokenize(e) if isinstance(e, str) else e) for e in expressions]
        T = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        mask = np.zeros((len(seqs), T))
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        return ids, mask

    def copy(self) -> "ModelBundle":
        arrays = {k: v.copy() for k, v in self.all_arrays().items()}
        return _bundle_from_arrays(
            self.dims, list(self.vocab), arrays, self.embedding_trainable,
            self.use_baseline, self.use_category, list(self.class_names),
        )


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


# -- forward / backward ------------------------------------------------------


def forward(model: ModelBundle, images, ids, mask) -> dict:
    """Batched forward pass at feature-grid resolution.

    Returns a dict with ``p`` (combined), ``p1``, ``p2``, ``ptext``, ``pmap``
    (absent entries for disabled paths) and the caches needed by ``backward``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeMismatch(f"expected (B, H, W, 3) images, got {images.shape}")
    X = model.embedding[ids]
    out = {"ids": ids, "mask": mask}
    p1 = p2 = None
    if model.use_baseline:
        F, fcache = features_forward(model.conv, images)
        out["F_cache"] = fcache
        e, seg_steps = lstm_forward(model.seg_lstm, X, mask)
        p1, hcache = baseline_forward(model.head, F, e)
        out.update(p1=p1, seg_steps=seg_steps, head_cache=hcache)
    if model.use_category:
        t, cls_steps = lstm_forward(model.cls_lstm, X, mask)
        ptext, ccache = classifier_forward(model.classifier, t)
        Fc, fccache = features_forward(model.cat_conv, images)
        pmap, catcache = category_forward(model.category, Fc)
        p2 = fuse(pmap, ptext)
        out.update(
            Fc_cache=fccache,
            p2=p2, ptext=ptext, pmap=pmap,
            cls_steps=cls_steps, cls_cache=ccache, cat_cache=catcache,
        )
    if p1 is None:
        p1 = np.zeros_like(p2)
    if p2 is None:
        p2 = np.zeros_like(p1)
    out["p"] = combine(p1, p2, model.fusion)
    out["grid"] = out["p"].shape[1:]
    return out


def backward(model: ModelBundle, out, dp=None, dp1=None, dp2=None, dtext_logits=None) -> dict:
    """Gradients for every trainable array.

    ``dp`` is ``dL/dp`` on the combined map; ``dp1`` / ``dp2`` are extra direct
    gradients on the two path outputs; ``dtext_logits`` is an extra gradient on
    the classifier logits. Any of them may be ``None``.
    """
    grads = {}
    alpha = model.alpha
    B, h, w = out["p"].shape
    zero = np.zeros((B, h, w))
    dp = zero if dp is None else dp
    D = model.dims.embedding_dim
    dX = np.zeros(out["ids"].shape + (D,))

    if model.use_baseline and model.use_category:
        _, _, draw = combine_backward(out["p1"], out["p2"], model.fusion, dp)
        grads["alpha_raw"] = np.array([draw])

    if model.use_baseline:
        p1 = out["p1"]
        g1 = alpha * dp if dp1 is None else alpha * dp + dp1
        dlogit = g1 * p1 * (1.0 - p1)
        hgrads, dF, de = baseline_backward(model.head, out["head_cache"], dlogit)
        for k, v in asdict_shallow(features_backward(model.conv, out["F_cache"], dF)).items():
            grads["conv." + k] = v
        dW, db, dXs = lstm_backward(model.seg_lstm, out["seg_steps"], de)
        dX += dXs
        grads["seg_lstm.W"], grads["seg_lstm.b"] = dW, db
        for k, v in asdict_shallow(hgrads).items():
            grads["head." + k] = v

    if model.use_category:
        dp2 = (1.0 - alpha) * dp if dp2 is None else (1.0 - alpha) * dp + dp2
        pmap, ptext = out["pmap"], out["ptext"]
        dpmap = dp2[..., None] * ptext[:, None, None, :]
        dptext = np.einsum("bhw,bhwk->bk", dp2, pmap)
        dpix = softmax_backward(pmap, dpmap)
        cgrads, dFc = category_backward(model.category, out["cat_cache"], dpix)
        for k, v in asdict_shallow(features_backward(model.cat_conv, out["Fc_cache"], dFc)).items():
            grads["cat_conv." + k] = v
        dtl = softmax_backward(ptext, dptext)
        if dtext_logits is not None:
            dtl = dtl + dtext_logits
        clgrads, dt = classifier_backward(model.classifier, out["cls_cache"], dtl)
        dW, db, dXc = lstm_backward(model.cls_lstm, out["cls_steps"], dt)
        dX += dXc
        grads["cls_lstm.W"], grads["cls_lstm.b"] = dW, db
        for k, v in asdict_shallow(clgrads).items():
            grads["classifier." + k] = v
        for k, v in asdict_shallow(cgrads).items():
            grads["category." + k] = v

    if model.embedding_trainable:
        demb = np.zeros_like(model.embedding)
        m = out["mask"] > 0
        np.add.at(demb, out["ids"][m], dX[m])
        grads["embedding"] = demb
    return grads


# -- inference ---------------------------------------------------------------


def predict_grid(model: ModelBundle, image, expression) -> dict:
    ids, mask = model.batch_ids([expression])
    out = forward(model, np.asarray(image, dtype=np.float64)[None], ids, mask)
    res = {"p": out["p"][0]}
    for k in ("p1", "p2", "ptext", "pmap"):
        if k in out:
            res[k] = out[k][0]
    return res


def predict(model: ModelBundle, image, expression, threshold: float = 0.5):
    """Full-resolution foreground heatmap and binary mask for one expression.

    Fusion and combination happen on the feature grid; the combined map is
    upsampled once and then thresholded.
    """
    image = np.asarray(image, dtype=np.float64)
    grid = predict_grid(model, image, expression)["p"]
    heat = upsample_bilinear(grid, image.shape[0], image.shape[1])
    return heat, binarize(heat, threshold)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: ModelBundle, path) -> None:
    """Binary checkpoint.

    Layout: the line ``REFSEG-CKPT 1``, one line of JSON header (dims, flags,
    vocabulary, class names, and the ordered list of ``[name, shape]`` blocks),
    then each block as little-endian float64 in row-major order.
    """
    arrays = model.all_arrays()
    header = {
        "format": FORMAT_VERSION,
        "dims": asdict(model.dims),
        "D": model.dims.embedding_dim,
        "H": model.dims.hidden,
        "H_mlp": model.dims.mlp_hidden,
        "M": model.dims.n_classes,
        "embedding_trainable": model.embedding_trainable,
        "use_baseline": model.use_baseline,
        "use_category": model.use_category,
        "vocab": list(model.vocab),
        "class_names": list(model.class_names),
        "blocks": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + b" %d\n" % FORMAT_VERSION)
        f.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n")
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelBundle:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    first = data[:nl].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if int(first[1]) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {first[1]!r}")
    nl2 = data.find(b"\n", nl + 1)
    header = json.loads(data[nl + 1 : nl2].decode("utf-8"))
    pos = nl2 + 1
    arrays = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[pos : pos + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"{path}: truncated block {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return _bundle_from_arrays(
        ModelDims(**header["dims"]),
        header["vocab"],
        arrays,
        header["embedding_trainable"],
        header["use_baseline"],
        header["use_category"],
        header["class_names"],
    )


def _bundle_from_arrays(dims, vocab, a, trainable, use_baseline, use_category, class_names):
    return ModelBundle(
        dims=dims,
        vocab=vocab,
        embedding=a["embedding"],
        embedding_trainable=trainable,
        conv=ConvParams(a["conv.W1"], a["conv.b1"], a["conv.W2"], a["conv.b2"]),
        seg_lstm=LstmParams(a["seg_lstm.W"], a["seg_lstm.b"]),
        head=HeadParams(a["head.U"], a["head.bu"], a["head.v"], a["head.bv"]),
        cls_lstm=LstmParams(a["cls_lstm.W"], a["cls_lstm.b"]),
        classifier=ClassifierParams(
            a["classifier.W1"], a["classifier.b1"], a["classifier.W2"], a["classifier.b2"]
        ),
        category=CategoryParams(a["category.A"], a["category.ba"], a["category.B"], a["category.bb"]),
        cat_conv=ConvParams(a["cat_conv.W1"], a["cat_conv.b1"], a["cat_conv.W2"], a["cat_conv.b2"]),
        alpha_raw=a["alpha_raw"],
        use_baseline=use_baseline,
        use_category=use_category,
        class_names=class_names,
    )
