"""Command-line entry point: ``fecnet {train,eval,segment,gradcheck,inspect}``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numerical abort (NaN/Inf during training).

Run configuration files are UTF-8 ``key = value`` lines; ``#`` starts a
comment. Keys are the fields of ``ModelConfig`` and ``TrainConfig`` plus the
data keys below. Sequences are comma separated; ``none`` clears optional
values. Unknown keys are rejected.

    data          directory of idx files or class folders, or ``synthetic-mnist``
    data_format   idx_ubyte | image_directory
    train_limit   use only the first N training images
    val_limit     use only the first N evaluation images
    val_split     split used for the per-epoch evaluation (default ``test``)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .cluster import DispatchVariant, SimilarityKind
from .errors import (ConfigurationError, ContractError, CorruptCheckpointError, DomainError,
                     FormatError, NonFiniteError)
from .gradcheck import TOLERANCE, layer_suite
from .hierarchy import (assignment_dump, build_pyramid, kmeans_reduce, overlay,
                        render_segmentation, segmentation_dump, write_json, write_png)
from .model import Model, ModelConfig
from .training import TrainConfig, evaluate, fit, load_dataset, prepare_images

log = logging.getLogger("fecnet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DATA_KEYS = {"data": None, "data_format": "idx_ubyte", "train_limit": None, "val_limit": None,
             "val_split": "test"}
CHECKPOINT_NAME = "checkpoint.fecw"
METRICS_NAME = "metrics.log"
RESOLVED_NAME = "config.resolved"


class UsageError(Exception):
    pass


def build_id() -> str:
    """``git describe``-style identifier of the running code."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"fecnet-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"fecnet-{__version__}"


# -- run configuration ------------------------------------------------------------

def _field_types():
    types = {}
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            types[f.name] = (cls, f)
    return types


def _coerce(key, text, default):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, tuple):
            parts = [float(p) for p in text.replace("x", ",").split(",") if p.strip()]
            return tuple(int(p) if p.is_integer() else p for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None and key in ("grad_clip",):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into raw strings, rejecting unknown keys."""
    known = set(_field_types()) | set(DATA_KEYS)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict

    def items(self):
        merged = {**self.model.to_dict(), **self.train.to_dict(), **self.data}
        return sorted(merged.items())

    def render(self) -> str:
        lines = []
        for k, v in self.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def resolve_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    raw = dict(raw)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    model_defaults, train_defaults = ModelConfig(), TrainConfig()
    model_kw, train_kw, data = {}, {}, dict(DATA_KEYS)
    for key, value in raw.items():
        if key in DATA_KEYS:
            if key.endswith("_limit") and value is not None:
                value = None if str(value).lower() == "none" else int(value)
            data[key] = value
            continue
        cls, _ = _field_types()[key]
        target, defaults = (model_kw, model_defaults) if cls is ModelConfig else (train_kw, train_defaults)
        default = getattr(defaults, key)
        target[key] = _coerce(key, value, default) if isinstance(value, str) else value
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None
    if "seed" in raw:  # one seed drives both initialisation and data order
        model.seed = train.seed
    model.validate()
    train.validate()
    return RunConfig(model, train, data)


def load_run_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigurationError(f"{path}: not UTF-8 text") from None
    return resolve_config(parse_config_text(text), overrides)


# -- commands ---------------------------------------------------------------------

def _data_root(spec: str | None, num_train=60000, num_test=10000) -> Path:
    if spec is None:
        raise ConfigurationError("config key 'data' is required for training")
    if spec == "synthetic-mnist":
        from .synthetic import mnist_dir

        return mnist_dir(n_train=num_train, n_test=num_test)
    root = Path(spec)
    if not root.exists():
        raise UsageError(f"data path not found: {root}")
    return root


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "dispatch_variant": args.dispatch,
                 "similarity": args.similarity}
    run = load_run_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _log_to(out / "train.log")
    try:
        return _train(run, out)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def _train(run: RunConfig, out: Path) -> int:
    bid = build_id()
    log.info("build %s", bid)
    log.info("resolved config:\n%s", run.render().rstrip())
    (out / RESOLVED_NAME).write_text(run.render(), encoding="utf-8")

    cfg = run.model
    root = _data_root(run.data["data"])
    fmt = run.data["data_format"]
    train = load_dataset(root, fmt, "train", cfg.num_classes, size=cfg.input_size,
                         limit=run.data["train_limit"])
    val = load_dataset(root, fmt, run.data["val_split"], cfg.num_classes, stats=train.stats(),
                       size=cfg.input_size, limit=run.data["val_limit"])
    model = Model(cfg)
    model.meta = {"normalization": train.stats(), "build": bid,
                  "train_config": run.train.to_dict(), "data_format": fmt}
    metrics_path = out / METRICS_NAME
    metrics_path.write_text("", encoding="utf-8")

    def on_epoch(m):
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(m.line() + "\n")

    history = fit(model, train, run.train, val=val, on_epoch=on_epoch)
    final = history[-1]
    model.meta["final"] = {"epoch": final.epoch, "train_loss": final.train_loss,
                           "val_top1": final.val_top1, "val_loss": final.val_loss}
    digest = save_checkpoint(model, out / CHECKPOINT_NAME)
    log.info("wrote %s (sha256 %s)", out / CHECKPOINT_NAME, digest)
    print(final.line())
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    stats = model.meta.get("normalization")
    if stats is None:
        raise ConfigurationError("checkpoint carries no normalisation statistics")
    data = Path(args.dataset)
    if not data.exists():
        raise UsageError(f"dataset not found: {data}")
    cfg = model.config
    ds = load_dataset(data, args.format or model.meta.get("data_format", "idx_ubyte"), args.split,
                      cfg.num_classes, stats=stats, size=cfg.input_size, limit=args.limit)
    res = evaluate(model, ds)
    print(f"top1={res.top1:.6f} loss={res.loss:.6f} count={res.count}")
    return EXIT_OK


def _load_model(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def load_image(path, size) -> np.ndarray:
    """Decode ``path`` as RGB uint8, bilinearly resized to ``size`` (h, w) if needed."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from None
    h, w = size
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def segment_image(model: Model, image: np.ndarray, levels, k=None, median_radius=0, seed=0):
    """Run one image through ``model`` and render the requested pyramid levels.

    Returns ``(pyramid, records, {level: (Segmentation, dump dict)})``.
    """
    stats = model.meta.get("normalization")
    x, _, _ = prepare_images(image[None], None, stats)
    with ad.no_grad():
        _, records = model.forward(x.astype(model.dtype), record_assignments=True)
    pyramid = build_pyramid(records, base_block=model.config.stem_stride)
    out = {}
    for level in levels:
        pyramid.level(level)  # range check
        regroup = None
        if k is not None:
            reps = pyramid.records[level - 1].representatives[0]
            regroup = kmeans_reduce(reps, k, seed)
        seg = render_segmentation(pyramid, level, regroup, median_radius)
        extra = {"k": k, "median_radius": median_radius, "seed": seed}
        out[level] = (seg, segmentation_dump(pyramid, level, seg, **extra))
    return pyramid, records, out


def cmd_segment(args) -> int:
    model = _load_model(args.checkpoint)
    image = load_image(args.image, model.config.input_size)
    num_levels = len(model.pools)  # each pooling layer adds one pyramid level
    levels = args.level or [num_levels]
    for level in levels:
        if not 1 <= level <= num_levels:
            raise UsageError(f"level {level} outside 1..{num_levels}")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be at least 1")
    if args.median_radius < 0:
        raise UsageError("--median-radius must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, records, rendered = segment_image(model, image, levels, args.k, args.median_radius,
                                         args.seed)
    write_json(out / "assignments.json", assignment_dump(records))
    for level, (seg, dump) in rendered.items():
        write_json(out / f"segments_level{level}.json", dump)
        write_png(out / f"overlay_level{level}.png", overlay(image, seg.colors, 0.5))
        print(f"level {level}: {len(dump['segments'])} segments -> "
              f"{out / f'segments_level{level}.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    similarity = SimilarityKind.parse(args.similarity or "cosine")
    variant = DispatchVariant.parse(args.dispatch or "eq7")
    report = layer_suite(seed=args.seed, similarity=similarity, variant=variant)
    offenders = []
    for layer, groups in report.items():
        for name, err in groups.items():
            flag = "ok" if err < TOLERANCE else "FAIL"
            print(f"{layer}.{name} max_rel_err={err:.3e} {flag}")
            if err >= TOLERANCE:
                offenders.append(f"{layer}.{name}")
    if offenders:
        print("gradient check failed: " + ", ".join(offenders))
        return EXIT_CHECK
    print(f"all gradients within {TOLERANCE:g}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    target = Path(args.target)
    if not target.is_file():
        raise UsageError(f"not found: {target}")
    if target.read_bytes()[:4] == b"FECW":
        config, meta, tensors = read_checkpoint(target)
        cfg = ModelConfig.from_dict(config)
        print(json.dumps({"config": config, "meta": meta}, indent=1, sort_keys=True))
        for name, arr in tensors.items():
            print(f"{name} {arr.dtype} {list(arr.shape)}")
        total = sum(a.size for a in tensors.values())
    else:
        run = load_run_config(target)
        print(run.render(), end="")
        cfg = run.model
        total = Model(cfg).num_parameters()
    grids = " ".join(f"{h}x{w}" for h, w in cfg.stage_grids())
    print(f"parameters {total}")
    print(f"stage grids {grids}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def _log_to(path):
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fecnet", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=build_id())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--dispatch", choices=[v.value for v in DispatchVariant])
        p.add_argument("--similarity", choices=["cosine", "dot", "euclidean"])

    p = sub.add_parser("train", help="train a model from a run configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy and loss of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--format", choices=["idx_ubyte", "image_directory"])
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="export cluster assignments and segment overlays")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, action="append",
                   help="pyramid level (1 = finest); repeat for several, default top")
    p.add_argument("--k", type=int, help="regroup the level's clusters with k-means")
    p.add_argument("--median-radius", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gradcheck", help="finite-difference check of one encode and one pool layer")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a checkpoint or a run configuration")
    p.add_argument("target")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                            stream=sys.stderr)
    logging.getLogger().setLevel(logging.INFO)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"fecnet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, FormatError, CorruptCheckpointError, DomainError,
            ContractError, FileNotFoundError) as exc:
        print(f"fecnet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
