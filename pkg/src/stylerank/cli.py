"""Command line: ``stylerank {train,evaluate,extract,index,query,serve}``.

Configuration is layered: built-in defaults, then ``--config FILE`` (JSON),
then ``--set dotted.path=value`` overrides, then the named flags of each
subcommand (every named flag is an alias for one dotted path).  stdout only
ever carries the JSON result; progress and diagnostics go to stderr, errors
as a single ``error: ...`` line.

Exit codes: 0 success, 1 runtime error, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from . import __version__

log = logging.getLogger("stylerank")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": None,
    "dataset": {
        "manifest": None,
        "val_manifest": None,
        "train_ratio": 0.8,
        "split_seed": 0,
        "image_size": 64,
    },
    "model": {"profile": "minibn", "feature_dim": None, "warm_start": None, "checkpoints": []},
    "train": {
        "optimizer": "adam",
        "learning_rate": 0.001,
        "momentum": 0.9,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_epsilon": 1e-8,
        "batch_size": 16,
        "lam": 0.0001,
        "max_epochs": 30,
        "patience": 3,
        "top_k": 5,
        "target_accuracy": None,
        "augment": {"preset": "category", "rotation_max_deg": None, "hsl_shift_max": None, "shear_max": None,
                    "aspect_min": None, "aspect_max": None, "vflip_prob": None, "flip_axis": None},
    },
    "output": {"checkpoint": "model.ckpt", "history": None, "plot_dir": None, "fmx": "features.fmx",
               "index": "features.btx", "figure": None, "config_out": None},
    "evaluate": {"checkpoint": None, "top_k": None},
    "extract": {"batch_size": 64},
    "index": {"fmx": None, "leaf_size": 32},
    "query": {"index": None, "fmx": None, "image": None, "k": 5, "exclude_self": False, "catalog": None},
    "serve": {"host": "127.0.0.1", "port": 8470, "k_default": 5, "k_max": 100, "max_body_bytes": 8 * 1024 * 1024},
}


class UsageError(Exception):
    """Invalid flags or configuration (exit code 2)."""


# --------------------------------------------------------------------------
# configuration plumbing
# --------------------------------------------------------------------------


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(args: argparse.Namespace, flag_paths: dict[str, str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            _merge(cfg, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key.path=value, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), _parse_value(value))
    for dest, dotted in flag_paths.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_dotted(cfg, dotted, value)
    if cfg["threads"] is None and os.environ.get("THREADS"):
        cfg["threads"] = int(os.environ["THREADS"])
    return cfg


def _write_sidecar(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=False) + "\n")
    sys.stdout.flush()


def _require(cfg: dict, dotted: str, flag: str):
    value = _get(cfg, dotted)
    if value in (None, "", []):
        raise UsageError(f"missing {flag} (config key {dotted})")
    return value


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _augment_config(aug: dict):
    from .augmentation import AugmentConfig

    presets = {"none": AugmentConfig.none, "category": AugmentConfig.category, "texture": AugmentConfig.texture}
    preset = aug.get("preset") or "none"
    if preset not in presets:
        raise UsageError(f"unknown augmentation preset {preset!r}; choose from {sorted(presets)}")
    base = presets[preset]().to_dict()
    base.update({k: v for k, v in aug.items() if k != "preset" and v is not None})
    try:
        return AugmentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid augmentation config: {exc}") from exc


def _train_config(cfg: dict):
    from .training import TrainConfig, TrainingError

    tc = dict(cfg["train"])
    tc["augment"] = _augment_config(tc["augment"])
    tc["seed"] = cfg["seed"]
    try:
        return TrainConfig(**tc)
    except (TypeError, TrainingError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _image_size(cfg: dict) -> tuple[int, int]:
    size = cfg["dataset"]["image_size"]
    if isinstance(size, int):
        return size, size
    return int(size[0]), int(size[1])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(cfg: dict) -> dict:
    from .dataset import load_manifest, split
    from .network.checkpoint import save_checkpoint
    from .network.model import NetworkModel
    from .training import evaluate, train, warm_start

    manifest = _require_file(_require(cfg, "dataset.manifest", "--manifest"), "manifest")
    config = _train_config(cfg)
    ds = load_manifest(manifest)
    if cfg["dataset"]["val_manifest"]:
        train_set = ds
        val_set = load_manifest(_require_file(cfg["dataset"]["val_manifest"], "validation manifest"))
        if val_set.class_names != train_set.class_names:
            val_set = _align_classes(val_set, train_set.class_names)
    else:
        sp = split(ds, cfg["dataset"]["train_ratio"], cfg["dataset"]["split_seed"])
        train_set, val_set = sp.train, sp.val
    log.info("train %d / val %d samples, %d classes", len(train_set), len(val_set), ds.num_classes)

    h, w = _image_size(cfg)
    model = NetworkModel.from_profile(cfg["model"]["profile"], ds.num_classes, (h, w, 3), ds.class_names,
                                      seed=cfg["seed"], feature_dim=cfg["model"]["feature_dim"])
    if cfg["model"]["warm_start"]:
        model = warm_start(model, _require_file(cfg["model"]["warm_start"], "warm-start checkpoint"))
        log.info("warm start from %s", cfg["model"]["warm_start"])
    model.provenance["task"] = ds.task_name

    best, history = train(model, train_set, val_set, config)
    out = Path(cfg["output"]["checkpoint"])
    out.parent.mkdir(parents=True, exist_ok=True)
    fp = save_checkpoint(best, out)
    history_path = Path(cfg["output"]["history"] or out.with_suffix(".history.jsonl"))
    history.save_jsonl(history_path)
    _write_sidecar(cfg, cfg["output"]["config_out"] or out.with_suffix(".config.json"))

    x_val, y_val = val_set.to_arrays((h, w), 3)
    report = evaluate(best, x_val, y_val, cfg["train"]["top_k"])
    if cfg["output"]["plot_dir"]:
        from . import plotting

        plot_dir = Path(cfg["output"]["plot_dir"])
        plotting.plot_history(history, plot_dir / "history.png")
        plotting.plot_confusion(report.confusion, best.class_names, plot_dir / "confusion.png", "validation")
        plotting.plot_class_frequencies({"train": train_set, "validation": val_set}, plot_dir / "class_frequency.png")
    return {"checkpoint": str(out), "fingerprint": fp, "history": str(history_path),
            "best_epoch": history.best_epoch, "epochs_run": len(history.records),
            "stop_reason": history.stop_reason, "report": report.to_dict()}


def _align_classes(ds, class_names):
    from .dataset import DatasetError, relabel

    index = {c: i for i, c in enumerate(class_names)}
    try:
        labels = [index[ds.class_names[s.label]] for s in ds.samples]
    except KeyError as exc:
        raise DatasetError(f"manifest label {exc.args[0]!r} is not one of the model classes {list(class_names)}") from exc
    return relabel(ds, labels, class_names, ds.task_name)


def cmd_evaluate(cfg: dict) -> dict:
    from .dataset import load_manifest
    from .network.checkpoint import load_checkpoint
    from .training import evaluate

    model = load_checkpoint(_require_file(_require(cfg, "evaluate.checkpoint", "--checkpoint"), "checkpoint"))
    ds = load_manifest(_require_file(_require(cfg, "dataset.manifest", "--manifest"), "manifest"))
    if ds.class_names != model.class_names:
        if not set(ds.class_names) <= set(model.class_names):
            raise RuntimeError(f"class-name mismatch: manifest {list(ds.class_names)} vs checkpoint {list(model.class_names)}")
        ds = _align_classes(ds, model.class_names)
    k = cfg["evaluate"]["top_k"]
    if k is None:
        k = min(5, model.num_classes)
    if not 1 <= k <= model.num_classes:
        raise UsageError(f"--top-k must be in [1, {model.num_classes}]")
    x, y = ds.to_arrays(model.input_shape[:2], model.input_shape[2])
    report = evaluate(model, x, y, k)
    if cfg["output"]["figure"]:
        from .plotting import plot_confusion

        plot_confusion(report.confusion, model.class_names, cfg["output"]["figure"], ds.task_name)
    return report.to_dict()


def cmd_extract(cfg: dict) -> dict:
    from .dataset import load_manifest
    from .feature_store import build_matrix, save_matrix
    from .network.checkpoint import load_checkpoint

    paths = _require(cfg, "model.checkpoints", "--checkpoint")
    models = [load_checkpoint(_require_file(p, "checkpoint")) for p in paths]
    ds = load_manifest(_require_file(_require(cfg, "dataset.manifest", "--manifest"), "manifest"))
    matrix = build_matrix(models, ds, cfg["extract"]["batch_size"])
    out = Path(cfg["output"]["fmx"])
    out.parent.mkdir(parents=True, exist_ok=True)
    checksum = save_matrix(matrix, out)
    _write_sidecar(cfg, cfg["output"]["config_out"] or out.with_suffix(".config.json"))
    return {"fmx": str(out), "n": len(matrix), "dims": list(matrix.dims),
            "fingerprints": list(matrix.fingerprints), "checksum": f"{checksum:016x}"}


def cmd_index(cfg: dict) -> dict:
    from .feature_store import load_matrix
    from .ranking import build, save_tree

    matrix = load_matrix(_require_file(_require(cfg, "index.fmx", "--fmx"), "feature matrix"))
    leaf_size = cfg["index"]["leaf_size"]
    if not isinstance(leaf_size, int) or leaf_size < 1:
        raise UsageError("--leaf-size must be a positive integer")
    tree = build(matrix, leaf_size)
    out = Path(cfg["output"]["index"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tree(tree, out)
    _write_sidecar(cfg, cfg["output"]["config_out"] or out.with_suffix(".config.json"))
    return {"index": str(out), "leaf_size": tree.leaf_size, "nodes": tree.node_count, "n": tree.n,
            "fmx_checksum": f"{tree.fmx_checksum:016x}"}


def cmd_query(cfg: dict) -> list:
    from .dataset import load_manifest, read_image
    from .pipeline import Recommender

    q = cfg["query"]
    k = q["k"]
    if not isinstance(k, int) or k < 1:
        raise UsageError("--k must be a positive integer")
    rec = Recommender.load(
        [_require_file(p, "checkpoint") for p in _require(cfg, "model.checkpoints", "--checkpoint")],
        _require_file(_require(cfg, "query.fmx", "--fmx"), "feature matrix"),
        _require_file(_require(cfg, "query.index", "--index"), "index"),
    )
    image = read_image(_require_file(_require(cfg, "query.image", "--image"), "query image"))
    result = rec.recommend_image(image, k, bool(q["exclude_self"]))
    if cfg["output"]["figure"]:
        from .plotting import plot_recommendations

        if not q["catalog"]:
            raise UsageError("--figure needs --catalog (manifest of the indexed images)")
        catalog = {s.id: s.image for s in load_manifest(_require_file(q["catalog"], "catalog manifest")).samples}
        plot_recommendations([(image, [(catalog[e.id], f"#{e.rank} {e.id}\nd={e.distance:.3f}") for e in result])],
                             cfg["output"]["figure"])
    if cfg["output"]["config_out"]:
        _write_sidecar(cfg, cfg["output"]["config_out"])
    return result.to_json()


def cmd_serve(cfg: dict) -> None:
    from .pipeline import Recommender
    from .service import ServiceConfig, serve

    rec = Recommender.load(
        [_require_file(p, "checkpoint") for p in _require(cfg, "model.checkpoints", "--checkpoint")],
        _require_file(_require(cfg, "query.fmx", "--fmx"), "feature matrix"),
        _require_file(_require(cfg, "query.index", "--index"), "index"),
    )
    s = cfg["serve"]
    if cfg["output"]["config_out"]:
        _write_sidecar(cfg, cfg["output"]["config_out"])
    serve(rec, ServiceConfig(s["host"], int(s["port"]), int(s["k_default"]), int(s["k_max"]), int(s["max_body_bytes"])))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

# (flag, dest, dotted path, argparse kwargs)
_COMMON = [
    ("--seed", "seed", "seed", {"type": int}),
    ("--threads", "threads", "threads", {"type": int}),
]

_FLAGS = {
    "train": [
        ("--manifest", "manifest", "dataset.manifest", {}),
        ("--val-manifest", "val_manifest", "dataset.val_manifest", {}),
        ("--train-ratio", "train_ratio", "dataset.train_ratio", {"type": float}),
        ("--split-seed", "split_seed", "dataset.split_seed", {"type": int}),
        ("--image-size", "image_size", "dataset.image_size", {"type": int}),
        ("--profile", "profile", "model.profile", {}),
        ("--feature-dim", "feature_dim", "model.feature_dim", {"type": int}),
        ("--warm-start", "warm_start", "model.warm_start", {}),
        ("--optimizer", "optimizer", "train.optimizer", {"choices": ["adam", "sgd_momentum", "sgd"]}),
        ("--lr", "lr", "train.learning_rate", {"type": float}),
        ("--momentum", "momentum", "train.momentum", {"type": float}),
        ("--batch", "batch", "train.batch_size", {"type": int}),
        ("--lambda", "lam", "train.lam", {"type": float}),
        ("--epochs", "epochs", "train.max_epochs", {"type": int}),
        ("--patience", "patience", "train.patience", {"type": int}),
        ("--top-k", "top_k", "train.top_k", {"type": int}),
        ("--target-accuracy", "target_accuracy", "train.target_accuracy", {"type": float}),
        ("--augment", "augment", "train.augment.preset", {"choices": ["none", "category", "texture"]}),
        ("--rotation-max", "rotation_max", "train.augment.rotation_max_deg", {"type": float}),
        ("--flip-axis", "flip_axis", "train.augment.flip_axis", {"choices": ["vertical", "horizontal"]}),
        ("--out", "out", "output.checkpoint", {}),
        ("--history", "history", "output.history", {}),
        ("--plot-dir", "plot_dir", "output.plot_dir", {}),
    ],
    "evaluate": [
        ("--checkpoint", "checkpoint", "evaluate.checkpoint", {}),
        ("--manifest", "manifest", "dataset.manifest", {}),
        ("--top-k", "top_k", "evaluate.top_k", {"type": int}),
        ("--figure", "figure", "output.figure", {}),
    ],
    "extract": [
        ("--checkpoint", "checkpoint", "model.checkpoints", {"action": "append"}),
        ("--manifest", "manifest", "dataset.manifest", {}),
        ("--batch-size", "batch_size", "extract.batch_size", {"type": int}),
        ("--out", "out", "output.fmx", {}),
    ],
    "index": [
        ("--fmx", "fmx", "index.fmx", {}),
        ("--leaf-size", "leaf_size", "index.leaf_size", {"type": int}),
        ("--out", "out", "output.index", {}),
    ],
    "query": [
        ("--index", "index", "query.index", {}),
        ("--fmx", "fmx", "query.fmx", {}),
        ("--checkpoint", "checkpoint", "model.checkpoints", {"action": "append"}),
        ("--image", "image", "query.image", {}),
        ("--k", "k", "query.k", {"type": int}),
        ("--exclude-self", "exclude_self", "query.exclude_self", {"action": "store_const", "const": True}),
        ("--catalog", "catalog", "query.catalog", {}),
        ("--figure", "figure", "output.figure", {}),
    ],
    "serve": [
        ("--index", "index", "query.index", {}),
        ("--fmx", "fmx", "query.fmx", {}),
        ("--checkpoint", "checkpoint", "model.checkpoints", {"action": "append"}),
        ("--host", "host", "serve.host", {}),
        ("--port", "port", "serve.port", {"type": int}),
        ("--k-default", "k_default", "serve.k_default", {"type": int}),
        ("--k-max", "k_max", "serve.k_max", {"type": int}),
        ("--max-body-bytes", "max_body_bytes", "serve.max_body_bytes", {"type": int}),
    ],
}

COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "extract": cmd_extract, "index": cmd_index,
            "query": cmd_query, "serve": cmd_serve}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stylerank", description="Visual similarity recommendation from CNN features.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in _FLAGS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config leaf by dotted path")
        p.add_argument("--config-out", dest="config_out", help="write the effective config here")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, dest, _, kwargs in _COMMON + flags:
            p.add_argument(flag, dest=dest, default=None, **kwargs)
    return parser


def main(argv=None) -> int:
    from ._checksum import ChecksumError, FormatError
    from .dataset import DatasetError

    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        flag_paths = {dest: dotted for _, dest, dotted, _ in _COMMON + _FLAGS[args.command]}
        if args.config_out:
            flag_paths["config_out"] = "output.config_out"
        cfg = effective_config(args, flag_paths)
        if cfg["train"]["optimizer"] == "sgd":
            cfg["train"]["optimizer"] = "sgd_momentum"
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
        limiter = _thread_limit(cfg["threads"])
        with limiter:
            result = COMMANDS[args.command](cfg)
        if result is not None:
            _emit(result)
        return 0
    except UsageError as exc:
        _fail(exc)
        return 2
    except DatasetError as exc:
        _fail(exc)
        return 2
    except (FormatError, ChecksumError) as exc:
        _fail(exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - any module error maps to exit 1
        log.debug("unhandled error", exc_info=True)
        _fail(exc)
        return 1


def _fail(exc: BaseException) -> None:
    message = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(f"error: {message}\n")
    sys.stderr.flush()


def _thread_limit(threads):
    import contextlib

    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


if __name__ == "__main__":
    sys.exit(main())
