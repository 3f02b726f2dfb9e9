"""``refseg`` command line.

Exit status: 0 on success, 1 on usage errors, 2 on data or model errors.
Every command first prints its resolved configuration as one JSON line on
standard error; standard output carries only the command's result.

Training options are resolved as: explicit flags, then ``--set KEY=VALUE``,
then the ``--config`` JSON file, then ``--preset``, then built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as ds
from . import model as mdl
from .embeddings import load_embedding_file, nearest_neighbors, save_embedding_file
from .errors import RefSegError
from .metrics import format_table
from .pnm import read_image, write_heatmap, write_mask
from .training import (
    ABLATION_ROWS,
    BENCHMARK_PRESET,
    GRAD_CHECK_PIECES,
    TrainConfig,
    TrainData,
    ablation_runs,
    evaluate_model,
    median_report,
    train_full,
)

log = logging.getLogger("refseg")

GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    print(json.dumps({"resolved_config": cfg}, sort_keys=True, default=str), file=sys.stderr)


# -- config resolution ---------------------------------------------------------

# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "seed": "seed",
    "epochs": "epochs",
    "pretrain_epochs": "pretrain_epochs",
    "lr": "lr",
    "momentum": "momentum",
    "batch_size": "batch_size",
    "mix_ratio": "mix_ratio",
    "referring_fraction": "referring_fraction",
}


def _parse_set(items):
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args) -> TrainConfig:
    merged = {}
    if getattr(args, "preset", None) == "benchmark":
        merged.update(BENCHMARK_PRESET)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RefSegError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise RefSegError(f"{args.config}: expected a JSON object")
        merged.update(loaded)
    merged.update(_parse_set(getattr(args, "set", None)))
    for dest, key in _TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            merged[key] = value
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as exc:
        raise RefSegError(f"bad config: {exc}") from None


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--config", help="JSON file of TrainConfig fields (default: none)")
    p.add_argument("--preset", choices=["none", "benchmark"], default="none",
                   help="start from a named settings bundle, below --config (default: none)")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {d.seed})")
    p.add_argument("--epochs", type=int, default=None, help=f"total epochs (default: {d.epochs})")
    p.add_argument("--pretrain-epochs", type=int, default=None,
                   help=f"leading epochs that train each path on its own loss (default: {d.pretrain_epochs})")
    p.add_argument("--lr", type=float, default=None, help=f"learning rate (default: {d.lr})")
    p.add_argument("--momentum", type=float, default=None, help=f"SGD momentum (default: {d.momentum})")
    p.add_argument("--batch-size", type=int, default=None, help=f"batch size (default: {d.batch_size})")
    p.add_argument("--mix-ratio", type=float, default=None,
                   help=f"fraction of class-name samples in the stream (default: {d.mix_ratio})")
    p.add_argument("--referring-fraction", type=float, default=None,
                   help=f"keep this fraction of referring samples (default: {d.referring_fraction})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                   help="any other TrainConfig field; VALUE parsed as JSON (repeatable; default: none)")


# -- data discovery ------------------------------------------------------------


def _sibling(manifest: Path, name: str):
    for cand in (manifest.parent / name, manifest.parent.parent / name):
        if cand.exists():
            return cand
    return None


def load_train_data(manifest, synth=None, vectors=None, classes=None, validation=None) -> TrainData:
    """Training data from a dataset directory written by ``synth-data``.

    Companion files default to ``classes.txt``, ``vectors.txt`` and
    ``synth/dataset.tsv`` next to the manifest or one level up.
    """
    manifest = Path(manifest)
    referring = ds.read_manifest(manifest)
    classes = Path(classes) if classes else _sibling(manifest, "classes.txt")
    if classes is None:
        raise RefSegError(f"no classes.txt found near {manifest}; pass --classes")
    catalog = ds.ClassCatalog.load(classes)
    vectors = Path(vectors) if vectors else _sibling(manifest, "vectors.txt")
    table = load_embedding_file(vectors) if vectors else None
    synth = Path(synth) if synth else _sibling(manifest, "synth/dataset.tsv")
    scenes = ds.scenes_from_samples(ds.read_manifest(synth)) if synth else []
    val = ds.read_manifest(validation) if validation else []
    return TrainData(catalog, referring, scenes, val, table)


# -- commands ------------------------------------------------------------------


def cmd_synth_data(args):
    _echo(args)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    spec = ds.SceneSpec(n_classes=args.classes)
    n_test = args.test_count if args.test_count is not None else max(1, args.count // 5)
    b = ds.build_benchmark(
        args.seed, n_train=args.count, n_test=n_test, n_vision=args.vision_count,
        spec=spec, embedding_dim=args.dim,
    )
    out = Path(args.out)
    ds.write_dataset(out / "train", b.train)
    ds.write_dataset(out / "test", b.test)
    ds.write_dataset(out / "synth", b.synthesized)
    save_embedding_file(b.vectors, out / "vectors.txt")
    b.catalog.save(out / "classes.txt")
    print(json.dumps({
        "train": len(b.train), "test": len(b.test), "synth": len(b.synthesized),
        "classes": b.catalog.size, "out": str(out),
    }))
    return 0


def cmd_train(args):
    config = resolve_config(args)
    _echo(args, train_config=config.to_dict())
    data = load_train_data(args.data, args.synth, args.vectors, args.classes, args.val)
    model, history = train_full(config, data)
    mdl.save_checkpoint(model, args.out)
    text = history.json_lines()
    if args.history:
        Path(args.history).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_eval(args):
    _echo(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    model = mdl.load_checkpoint(args.ckpt)
    samples = ds.read_manifest(args.data)
    report = evaluate_model(model, samples, jobs=args.jobs, threshold=args.threshold)
    print(report.to_json())
    if args.table:
        sys.stdout.write(format_table([(Path(args.ckpt).name, report)]))
    return 0


def cmd_predict(args):
    _echo(args)
    model = mdl.load_checkpoint(args.ckpt)
    image = read_image(args.image)
    heat, mask = mdl.predict(model, image, args.expr, args.threshold)
    write_heatmap(args.out_heatmap, heat)
    write_mask(args.out_mask, mask)
    return 0


def cmd_embed_nn(args):
    _echo(args)
    table = load_embedding_file(args.vectors)
    for token, sim in nearest_neighbors(table, args.token, args.k):
        print(f"{token}\t{sim:.6f}")
    return 0


def cmd_gradcheck(args):
    from .training import grad_check

    _echo(args)
    pieces = GRAD_CHECK_PIECES if args.piece == "all" else (args.piece,)
    worst_all = 0.0
    for piece in pieces:
        worst = max(grad_check(piece, seed=args.seed + i) for i in range(args.configs))
        worst_all = max(worst_all, worst)
        status = "ok" if worst < GRAD_TOL else "FAIL"
        print(f"{piece}\t{worst:.3e}\t{status}")
    return 0 if worst_all < GRAD_TOL else 2


def cmd_ablate(args):
    config = resolve_config(args)
    _echo(args, train_config=config.to_dict())
    d = Path(args.data_dir)
    data = load_train_data(d / "train" / "dataset.tsv")
    test = ds.read_manifest(d / "test" / "dataset.tsv")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    runs = ablation_runs(config, data, test, seeds=seeds, jobs=args.jobs)
    table = format_table([(row, median_report(runs[row])) for row, _ in ABLATION_ROWS])
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 0


# -- parser ----------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` unless the text already says it; required
    options say so instead."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text or action.dest == "help":
            return text
        if action.required:
            return text + " (required)"
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="refseg", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-data", help="write a synthetic shape-world dataset", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--count", type=int, default=500, help="referring training samples")
    p.add_argument("--test-count", type=int, default=None, help="test samples (default: count/5)")
    p.add_argument("--vision-count", type=int, default=None,
                   help="annotated scenes for class-name samples (default: count)")
    p.add_argument("--classes", type=int, default=8, help="object classes (background is added)")
    p.add_argument("--dim", type=int, default=50, help="word-vector dimension")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="referring dataset.tsv")
    p.add_argument("--synth", default=None, help="class-name dataset.tsv (default: found near --data)")
    p.add_argument("--vectors", default=None, help="word vectors (default: found near --data)")
    p.add_argument("--classes", default=None, help="classes.txt (default: found near --data)")
    p.add_argument("--val", default=None, help="validation dataset.tsv (default: none)")
    p.add_argument("--history", default=None, help="also write the history JSON lines here")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset.tsv")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--table", action="store_true", help="also print a plain-text table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image for one expression", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input PPM/PGM image")
    p.add_argument("--expr", required=True, help="referring expression")
    p.add_argument("--out-heatmap", required=True, help="output heatmap PGM")
    p.add_argument("--out-mask", required=True, help="output mask PGM")
    p.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("embed", help="word-vector tools", formatter_class=fmt)
    esub = p.add_subparsers(dest="embed_command", metavar="TOOL", parser_class=_Parser)
    esub.required = True
    q = esub.add_parser("nn", help="nearest neighbours by cosine similarity", formatter_class=fmt)
    q.add_argument("--vectors", required=True, help="text embedding file")
    q.add_argument("--token", required=True, help="query token")
    q.add_argument("--k", type=int, default=10, help="number of neighbours")
    q.set_defaults(func=cmd_embed_nn)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients", formatter_class=fmt)
    p.add_argument("--piece", choices=("all",) + GRAD_CHECK_PIECES, default="all", help="model piece")
    p.add_argument("--configs", type=int, default=5, help="random configurations per piece")
    p.add_argument("--seed", type=int, default=0, help="first random seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the five comparison rows", formatter_class=fmt)
    _add_train_flags(p)
    p.add_argument("--data-dir", required=True, help="directory written by synth-data")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    p.add_argument("--jobs", type=int, default=1, help="evaluation threads")
    p.add_argument("--out", default=None, help="also write the table here")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s", stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"refseg: {exc}", file=sys.stderr)
        return 1
    except (RefSegError, OSError, KeyError) as exc:
        print(f"refseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
