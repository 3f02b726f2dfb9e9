"""Shape-world data: scenes of coloured shapes, referring samples, and
class-name ("synthesized") samples, plus the on-disk dataset layout.

Randomness comes from numpy's PCG64 generator. Every scene and sample is built
from an integer seed, and per-item seeds are derived from a master seed with
``numpy.random.SeedSequence``, so a dataset is a pure function of its seed and
configuration.

On disk a dataset is a directory holding ``images/*.ppm`` (P6),
``masks/*.pgm`` (P5, 0/255) and a manifest ``dataset.tsv`` with one sample per
line::

    image_path<TAB>mask_path<TAB>class_index_or_dash<TAB>expression

Paths are relative to the manifest.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable
from .encoder import tokenize
from .errors import (
    BadClassIndex,
    EmptyName,
    FormatError,
    NoUnambiguousReferent,
    PlacementFailure,
    RefSegError,
)
from .pnm import read_image, read_mask, write_image, write_mask

BACKGROUND = "background"
QUALIFIERS = ("left", "right", "top", "bottom")

# name, shape, colour tag, rgb, synonyms
SHAPE_CLASSES = (
    ("ball", "circle", "red", (0.90, 0.15, 0.15), ("sphere", "orb")),
    ("box", "square", "blue", (0.15, 0.30, 0.95), ("crate", "cube")),
    ("tent", "triangle", "green", (0.15, 0.80, 0.20), ("teepee", "pyramid")),
    ("sign", "cross", "yellow", (0.95, 0.90, 0.15), ("marker", "signpost")),
    ("coin", "circle", "orange", (1.00, 0.55, 0.00), ("token", "medal")),
    ("tile", "square", "magenta", (0.90, 0.20, 0.85), ("slab", "block")),
    ("roof", "triangle", "cyan", (0.10, 0.85, 0.90), ("gable", "peak")),
    ("star", "cross", "white", (0.95, 0.95, 0.95), ("asterisk", "spark")),
)

FILLER_WORDS = ("the", "a", "one", "on", "of", "at", "in", "with", "side", "object", "thing")


def derive_seed(seed: int, *path) -> int:
    """A 64-bit seed for the item at ``path`` under master ``seed``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(p) for p in path]])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ClassCatalog:
    """Class names by index. Shape-world catalogs put ``background`` at index 0."""

    names: tuple

    def __post_init__(self):
        if len(self.names) < 2:
            raise RefSegError("a catalog needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise RefSegError("class names must be unique")
        for n in self.names:
            if not n or n != n.lower():
                raise RefSegError(f"class names must be non-empty lowercase, got {n!r}")

    @classmethod
    def shape_world(cls, n_classes: int = 8) -> "ClassCatalog":
        if not 1 <= n_classes <= len(SHAPE_CLASSES):
            raise RefSegError(f"shape-world supports 1..{len(SHAPE_CLASSES)} classes")
        return cls((BACKGROUND,) + tuple(c[0] for c in SHAPE_CLASSES[:n_classes]))

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def object_classes(self) -> range:
        return range(1, len(self.names))

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.names):
            raise BadClassIndex(f"class index {index} outside [0, {len(self.names)})")
        return self.names[index]

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ClassCatalog":
        names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(tuple(n for n in names if n))


@dataclass
class Instance:
    class_index: int
    color: str
    center: tuple  # (y, x) in pixels
    mask: np.ndarray  # (H, W) uint8


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    instances: list
    image_id: str | None = None

    def label_map(self) -> np.ndarray:
        lab = np.zeros(self.image.shape[:2], dtype=np.int64)
        for inst in self.instances:
            lab[inst.mask > 0] = inst.class_index
        return lab


@dataclass
class Sample:
    image: np.ndarray
    gt_mask: np.ndarray
    expression: str
    class_label: int | None = None
    image_id: str | None = None


@dataclass
class SceneSpec:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_radius: float = 7.0
    max_radius: float = 12.0
    gap: float = 2.0
    duplicate_prob: float = 0.4
    n_classes: int = 8
    noise: float = 0.04
    max_tries: int = 500


def synthesize_expression(class_name: str) -> str:
    """The class name itself, used verbatim as the referring expression."""
    if not class_name:
        raise EmptyName("class name must be non-empty")
    return class_name


def regions_to_samples(scenes, catalog: ClassCatalog) -> list:
    """One sample per annotated region, with the class name as expression."""
    out = []
    for si, scene in enumerate(scenes):
        for inst in scene.instances:
            if not 0 <= inst.class_index < catalog.size:
                raise BadClassIndex(
                    f"scene {si}: class index {inst.class_index} outside [0, {catalog.size})"
                )
            out.append(
                Sample(
                    image=scene.image,
                    gt_mask=inst.mask,
                    expression=synthesize_expression(catalog.names[inst.class_index]),
                    class_label=inst.class_index,
                    image_id=scene.image_id,
                )
            )
    return out


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        m = dy * dy + dx * dx <= r * r
    elif kind == "square":
        s = 0.85 * r
        m = (np.abs(dy) <= s) & (np.abs(dx) <= s)
    elif kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        m = (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    elif kind == "cross":
        arm = r / 3.0
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.astype(np.uint8)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    """A deterministic scene of non-overlapping coloured shapes."""
    if spec.size < 16:
        raise RefSegError("scene size must be at least 16")
    if not 1 <= spec.min_objects <= spec.max_objects:
        raise RefSegError("need 1 <= min_objects <= max_objects")
    if not 1 <= spec.n_classes <= len(SHAPE_CLASSES):
        raise RefSegError(f"n_classes must lie in 1..{len(SHAPE_CLASSES)}")
    rng = np.random.default_rng(seed)
    size = spec.size
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    # repeats come only from the duplicate draw; other picks take an unused class
    classes = []
    for _ in range(n):
        unused = [k for k in range(1, spec.n_classes + 1) if k not in classes]
        if classes and (not unused or rng.random() < spec.duplicate_prob):
            classes.append(classes[int(rng.integers(len(classes)))])
        else:
            classes.append(unused[int(rng.integers(len(unused)))])

    placed = []  # (cy, cx, r)
    for _ in range(n):
        for _ in range(spec.max_tries):
            r = rng.uniform(spec.min_radius, spec.max_radius)
            cy = rng.uniform(r + 1, size - r - 1)
            cx = rng.uniform(r + 1, size - r - 1)
            if all(
                np.hypot(cy - py, cx - px) >= r + pr + spec.gap for py, px, pr in placed
            ):
                placed.append((cy, cx, r))
                break
        else:
            raise PlacementFailure(f"could not place object {len(placed) + 1} of {n}")

    base = rng.uniform(0.05, 0.25, size=3)
    image = base + rng.normal(0.0, spec.noise, size=(size, size, 3))
    instances = []
    for k, (cy, cx, r) in zip(classes, placed):
        name, kind, tag, rgb, _ = SHAPE_CLASSES[k - 1]
        mask = shape_mask(kind, cy, cx, r, size)
        shade = np.asarray(rgb) * rng.uniform(0.85, 1.0)
        pix = mask > 0
        image[pix] = shade + rng.normal(0.0, spec.noise, size=(int(pix.sum()), 3))
        instances.append(Instance(k, tag, (cy, cx), mask))
    image = np.clip(image, 0.0, 1.0)
    return Scene(image=image, instances=instances)


def _unique_extreme(values, i, largest):
    v = values[i]
    others = [x for j, x in enumerate(values) if j != i]
    return all(v > x for x in others) if largest else all(v < x for x in others)


def referring_expression(scene: Scene, target: int, catalog: ClassCatalog, rng=None):
    """Expression naming ``target`` unambiguously, or ``None`` if impossible."""
    inst = scene.instances[target]
    name = catalog.name(inst.class_index)
    same = [j for j, o in enumerate(scene.instances) if o.class_index == inst.class_index]
    if len(same) == 1:
        return name
    pos = same.index(target)
    ys = [scene.instances[j].center[0] for j in same]
    xs = [scene.instances[j].center[1] for j in same]
    valid = []
    if _unique_extreme(xs, pos, largest=False):
        valid.append("left")
    if _unique_extreme(xs, pos, largest=True):
        valid.append("right")
    if _unique_extreme(ys, pos, largest=False):
        valid.append("top")
    if _unique_extreme(ys, pos, largest=True):
        valid.append("bottom")
    if not valid:
        return None
    q = valid[int(rng.integers(len(valid)))] if rng is not None else valid[0]
    return f"{q} {name}"


def make_referring_sample(seed: int, scene: Scene, catalog: ClassCatalog, max_tries: int = 20) -> Sample:
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        target = int(rng.integers(len(scene.instances)))
        expr = referring_expression(scene, target, catalog, rng)
        if expr is not None:
            inst = scene.instances[target]
            return Sample(
                image=scene.image,
                gt_mask=inst.mask,
                expression=expr,
                class_label=inst.class_index,
                image_id=scene.image_id,
            )
    raise NoUnambiguousReferent("no instance could be named unambiguously")


def substitute_synonym(expression: str, class_name: str, synonyms, rng) -> str:
    """Replace the class word in a shape-world expression by a random synonym."""
    toks = expression.split(" ")
    syn = synonyms[int(rng.integers(len(synonyms)))]
    return " ".join(syn if t == class_name else t for t in toks)


def mix_datasets(referring, synthesized, ratio: float = 0.5, seed: int = 0) -> list:
    """Interleave shuffled referring and synthesized samples.

    All referring samples appear once; synthesized samples are added so that
    they make up ``ratio`` of the stream (cycling through reshuffled passes if
    more are needed than exist). The interleave is spread evenly, so every
    prefix of length n holds within one of ``ratio * n`` synthesized samples.
    """
    if not 0.0 <= ratio <= 1.0:
        raise RefSegError(f"ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    referring = list(referring)
    synthesized = list(synthesized)
    if not synthesized:
        ratio = 0.0
    if ratio >= 1.0:
        n_ref, n_syn = 0, len(synthesized)
    else:
        n_ref = len(referring)
        n_syn = int(round(ratio / (1.0 - ratio) * n_ref))
    ref_order = [referring[i] for i in rng.permutation(len(referring))][:n_ref]
    syn_order = []
    while len(syn_order) < n_syn:
        syn_order += [synthesized[i] for i in rng.permutation(len(synthesized))]
    syn_order = syn_order[:n_syn]
    N = n_ref + n_syn
    stream = []
    ri = si = 0
    for i in range(N):
        if (i + 1) * n_syn // N > i * n_syn // N:
            stream.append(syn_order[si])
            si += 1
        else:
            stream.append(ref_order[ri])
            ri += 1
    return stream


def make_word_vectors(
    catalog: ClassCatalog,
    seed: int,
    dim: int = 50,
    synonym_noise: float = 0.25,
    extra_words=FILLER_WORDS,
) -> EmbeddingTable:
    """Stand-in for a pretrained vector file.

    Each class gets a random concept direction; its name and synonyms sit at
    that direction plus independent noise of relative scale ``synonym_noise``.
    Qualifiers and filler words are independent random vectors.
    """
    rng = np.random.default_rng(seed)
    tokens, rows = [], []
    syn_by_name = {c[0]: c[4] for c in SHAPE_CLASSES}
    for name in catalog.names[1:]:
        concept = rng.normal(0.0, 1.0, dim)
        for word in (name,) + tuple(syn_by_name.get(name, ())):
            tokens.append(word)
            rows.append(concept + synonym_noise * rng.normal(0.0, 1.0, dim))
    for word in QUALIFIERS + tuple(extra_words):
        if word not in tokens:
            tokens.append(word)
            rows.append(rng.normal(0.0, 1.0, dim))
    return EmbeddingTable(tokens, np.array(rows))


@dataclass
class Benchmark:
    catalog: ClassCatalog
    train: list
    test: list
    vision: list  # scenes with full class annotation
    synthesized: list
    vectors: EmbeddingTable
    seed: int = 0
    spec: SceneSpec = field(default_factory=SceneSpec)


def _scene_with_id(seed, spec, image_id):
    scene = generate_scene(seed, spec)
    scene.image_id = image_id
    return scene


def build_benchmark(
    seed: int,
    n_train: int = 500,
    n_test: int = 100,
    n_vision: int | None = None,
    spec: SceneSpec = SceneSpec(),
    test_synonym_rate: float = 0.5,
    train_synonym_rate: float = 0.0,
    embedding_dim: int = 50,
    vision_duplicate_prob: float = 0.0,
) -> Benchmark:
    """Referring train/test splits, a fully annotated vision-only split, its
    class-name samples, and stand-in word vectors, all from one seed.

    Vision scenes repeat classes with ``vision_duplicate_prob`` (default never):
    a bare class name over a scene holding two such objects names neither one
    in particular, while its per-instance sample would claim just one.
    """
    catalog = ClassCatalog.shape_world(spec.n_classes)
    n_vision = n_train if n_vision is None else n_vision
    syn_by_name = {c[0]: c[4] for c in SHAPE_CLASSES}

    def referring(split_code, n, rate, prefix):
        out = []
        for i in range(n):
            scene = _scene_with_id(derive_seed(seed, split_code, i, 0), spec, f"{prefix}{i:05d}")
            s = make_referring_sample(derive_seed(seed, split_code, i, 1), scene, catalog)
            rng = np.random.default_rng(derive_seed(seed, split_code, i, 2))
            if rng.random() < rate:
                name = catalog.names[s.class_label]
                s.expression = substitute_synonym(s.expression, name, syn_by_name[name], rng)
            out.append(s)
        return out

    train = referring(1, n_train, train_synonym_rate, "train")
    test = referring(2, n_test, test_synonym_rate, "test")
    vspec = replace(spec, duplicate_prob=vision_duplicate_prob)
    vision = [
        _scene_with_id(derive_seed(seed, 3, i, 0), vspec, f"vision{i:05d}") for i in range(n_vision)
    ]
    return Benchmark(
        catalog=catalog,
        train=train,
        test=test,
        vision=vision,
        synthesized=regions_to_samples(vision, catalog),
        vectors=make_word_vectors(catalog, derive_seed(seed, 4), dim=embedding_dim),
        seed=seed,
        spec=spec,
    )


def scenes_from_samples(samples) -> list:
    """Rebuild scenes from per-region samples that share an ``image_id``.

    Used to recover per-pixel class labels from a class-name sample manifest.
    """
    groups = {}
    order = []
    for s in samples:
        key = s.image_id if s.image_id is not None else id(s.image)
        if key not in groups:
            groups[key] = Scene(image=s.image, instances=[], image_id=s.image_id)
            order.append(key)
        ys, xs = np.nonzero(s.gt_mask)
        center = (float(ys.mean()), float(xs.mean())) if len(ys) else (0.0, 0.0)
        if s.class_label is not None:
            groups[key].instances.append(Instance(s.class_label, "-", center, s.gt_mask))
    return [groups[k] for k in order]


# -- disk layout ----------------------------------------------------------------


def write_dataset(directory, samples, manifest: str = "dataset.tsv") -> Path:
    """Write images, masks and a manifest; images shared by samples are written once."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    written = {}
    for i, s in enumerate(samples):
        key = s.image_id if s.image_id is not None else f"img{i:05d}"
        if key not in written:
            rel = f"images/{key}.ppm"
            write_image(directory / rel, s.image)
            written[key] = rel
        mask_rel = f"masks/{i:05d}.pgm"
        write_mask(directory / mask_rel, s.gt_mask)
        label = "-" if s.class_label is None else str(int(s.class_label))
        if "\t" in s.expression or "\n" in s.expression:
            raise FormatError(f"expression {s.expression!r} contains a tab or newline")
        lines.append(f"{written[key]}\t{mask_rel}\t{label}\t{s.expression}\n")
    path = directory / manifest
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)
    return path


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    cache = {}
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            img_rel, mask_rel, label, expr = parts
            if label == "-":
                cls = None
            else:
                try:
                    cls = int(label)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad class index {label!r}") from None
            tokenize(expr)
            if img_rel not in cache:
                cache[img_rel] = read_image(base / img_rel)
            samples.append(
                Sample(
                    image=cache[img_rel],
                    gt_mask=read_mask(base / mask_rel),
                    expression=expr,
                    class_label=cls,
                    image_id=Path(img_rel).stem,
                )
            )
    return samples
