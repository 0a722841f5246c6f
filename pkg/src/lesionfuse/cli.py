"""``lesionfuse`` command: synth, preprocess, train, evaluate, predict.

Every subcommand resolves its configuration as defaults < ``--config`` JSON
file < command-line flags, writes the result to ``<out>/resolved_config.json``
and only then starts working.  Exit codes: 0 ok, 2 usage, 1 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import imaging, metadata as md, synth
from .checkpoint import load_checkpoint
from .data import assemble
from .errors import ConfigError, LesionFuseError, SchemaError, ShapeError
from .evaluation import evaluate, export_embeddings, write_report_files
from .model import ModelConfig, build_model, forward
from .tensor import Tensor, no_grad, softmax
from .training import LossConfig, TrainConfig, fit

IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg", ".bmp")
PAPER_ENCODER = [16, 32, 64, 128, 256]


def _train_defaults() -> dict:
    d = asdict(TrainConfig())
    d.pop("augment")
    return d


def default_config() -> dict:
    model = asdict(ModelConfig())
    for derived in ("meta_input_dim", "n_classes", "input_size", "seed"):
        model.pop(derived)
    return {
        "seed": 0,
        "paths": {"data_dir": None, "metadata": None, "schema": None, "split_file": None,
                  "out": None, "checkpoint": None},
        "synth": {k: v for k, v in asdict(synth.SynthConfig()).items() if k != "seed"},
        "preprocess": asdict(imaging.PreprocessConfig()),
        "model": model,
        "train": {k: v for k, v in _train_defaults().items() if k != "seed"},
        "augment": {k: v for k, v in asdict(imaging.AugmentConfig()).items() if k != "seed"},
        "loss": asdict(LossConfig()),
        "split": {"ratios": [0.8, 0.1, 0.1], "group_by_patient": True},
        "impute": {"mode": "statistic"},
        "evaluate": {"partition": "test", "figures": False},
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def _flag_overrides(args: argparse.Namespace) -> dict:
    o: Dict[str, dict] = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                o[key] = value
            else:
                o.setdefault(section, {})[key] = value

    put(None, "seed", args.seed)
    for key in ("data_dir", "metadata", "schema", "split_file", "out", "checkpoint"):
        value = getattr(args, key, None)
        put("paths", key, None if value is None else str(value))
    put("train", "sr_method", getattr(args, "sr_method", None))
    put("train", "epochs", getattr(args, "epochs", None))
    put("train", "batch_size", getattr(args, "batch_size", None))
    put("train", "base_lr", getattr(args, "lr", None))
    put("model", "fusion_mode", getattr(args, "fusion", None))
    if getattr(args, "image_only", False):
        put("model", "image_only", True)
    put("loss", "ce_form", getattr(args, "ce_form", None))
    put("loss", "alpha", getattr(args, "alpha", None))
    put("loss", "beta", getattr(args, "beta", None))
    put("preprocess", "size", getattr(args, "input_size", None))
    if getattr(args, "skip_clahe", False):
        put("preprocess", "skip_clahe", True)
    if getattr(args, "skip_color", False):
        put("preprocess", "skip_color", True)
    put("impute", "mode", getattr(args, "impute", None))
    put("synth", "samples_per_class", getattr(args, "samples_per_class", None))
    put("synth", "image_size", getattr(args, "image_size", None))
    put("evaluate", "partition", getattr(args, "partition", None))
    if getattr(args, "figures", False):
        put("evaluate", "figures", True)
    return o


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    _merge(cfg, _flag_overrides(args))
    if getattr(args, "paper_scale", False):
        cfg["preprocess"]["size"] = 224
        cfg["model"]["encoder_channels"] = list(PAPER_ENCODER)
    # fail on bad values before anything touches the disk
    imaging.PreprocessConfig(**cfg["preprocess"])
    _train_config(cfg)
    LossConfig(**cfg["loss"])
    if cfg["impute"]["mode"] not in ("statistic", "autoencoder"):
        raise ConfigError(f"unknown imputation mode {cfg['impute']['mode']!r}")
    if cfg["evaluate"]["partition"] not in md.PARTITIONS + ("all",):
        raise ConfigError(f"unknown partition {cfg['evaluate']['partition']!r}")
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    aug = imaging.AugmentConfig(**cfg["augment"], seed=cfg["seed"])
    return TrainConfig(**cfg["train"], seed=cfg["seed"], augment=aug)


def _write_resolved(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    # the output dir is where this file lives; recording it would make
    # otherwise identical runs differ by path
    record = copy.deepcopy(cfg)
    record["paths"].pop("out", None)
    (out / "resolved_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# dataset location helpers


def _data_dir(cfg: dict) -> Path:
    if not cfg["paths"]["data_dir"]:
        raise ConfigError("--data-dir is required")
    d = Path(cfg["paths"]["data_dir"])
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return d


def _schema(cfg: dict, data_dir: Optional[Path]) -> md.MetadataSchema:
    if cfg["paths"]["schema"]:
        return md.MetadataSchema.load(cfg["paths"]["schema"])
    if data_dir is not None and (data_dir / "schema.json").exists():
        return md.MetadataSchema.load(data_dir / "schema.json")
    return md.packaged_schema()


def _metadata_path(cfg: dict, data_dir: Path) -> Path:
    p = Path(cfg["paths"]["metadata"]) if cfg["paths"]["metadata"] else data_dir / "metadata.csv"
    if not p.exists():
        raise FileNotFoundError(f"metadata file {p} does not exist")
    return p


def _image_index(data_dir: Path) -> Dict[str, Path]:
    """Map file names and stems to paths anywhere below the data directory."""
    root = data_dir / "images" if (data_dir / "images").is_dir() else data_dir
    index: Dict[str, Path] = {}
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".sr" + p.suffix):
            index.setdefault(p.name, p)
            index.setdefault(p.stem, p)
    return index


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict, args) -> int:
    out = Path(cfg["paths"]["out"])
    _write_resolved(cfg, out)
    scfg = synth.SynthConfig(**cfg["synth"], seed=cfg["seed"])
    synth.generate(scfg, out)
    print(f"wrote {scfg.n_classes * scfg.samples_per_class} samples to {out}")
    return 0


def cmd_preprocess(cfg: dict, args) -> int:
    out = Path(cfg["paths"]["out"])
    _write_resolved(cfg, out)
    data_dir = _data_dir(cfg)
    schema = _schema(cfg, data_dir)
    meta_path = _metadata_path(cfg, data_dir)
    records = md.parse_csv(meta_path, schema)
    pcfg = imaging.PreprocessConfig(**cfg["preprocess"])
    sr_cfg = replace(pcfg, size=2 * pcfg.size)
    index = _image_index(data_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    files: Dict[str, str] = {}
    errors: List[str] = []
    for r in records:
        sid = r.values[schema.id_column]
        src = index.get(sid) or index.get(Path(sid).stem)
        if src is None:
            errors.append(f"{sid}: image not found")
            continue
        try:
            dst = out / "images" / (Path(sid).stem + ".png")
            imaging.save_image(imaging.preprocess(imaging.load_image(src), pcfg), dst)
            files[dst.name] = _sha256(dst)
            sr_src = imaging.sr_path_for(src)
            if sr_src.exists():
                sr_dst = imaging.sr_path_for(dst)
                imaging.save_image(imaging.preprocess(imaging.load_image(sr_src), sr_cfg), sr_dst)
                files[sr_dst.name] = _sha256(sr_dst)
        except (OSError, LesionFuseError) as exc:
            errors.append(f"{sid}: {exc}")
    shutil.copyfile(meta_path, out / "metadata.csv")
    schema.save(out / "schema.json")
    md.write_encoded_cache(out / "metadata.lfm", [r.values[schema.id_column] for r in records],
                           [md.encode(r, schema) for r in records])
    manifest = {"preprocess": asdict(pcfg), "files": dict(sorted(files.items())), "errors": errors}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if errors:
        shown = "; ".join(errors[:5]) + (f"; ... ({len(errors)} total)" if len(errors) > 5 else "")
        raise OSError(f"{len(errors)} image(s) failed: {shown}")
    print(f"preprocessed {len(records)} images into {out}")
    return 0


def _preprocess_record(data_dir: Path, cfg: dict) -> dict:
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text())["preprocess"]
    return dict(cfg["preprocess"])


def _load_split(cfg: dict, records, schema, stored: Optional[dict] = None) -> md.SplitAssignment:
    ids = [r.values[schema.id_column] for r in records]
    if cfg["paths"]["split_file"]:
        return md.split(records, schema, cfg["split"]["ratios"], cfg["seed"],
                        split_file=cfg["paths"]["split_file"])
    if stored is not None and set(ids) <= set(stored["assignment"]):
        return md.SplitAssignment({i: stored["assignment"][i] for i in ids},
                                  stored["seed"], stored["ratios"])
    return md.split(records, schema, cfg["split"]["ratios"], cfg["seed"],
                    group_by_patient=cfg["split"]["group_by_patient"])


def cmd_train(cfg: dict, args) -> int:
    out = Path(cfg["paths"]["out"])
    _write_resolved(cfg, out)
    data_dir = _data_dir(cfg)
    schema = _schema(cfg, data_dir)
    records = md.parse_csv(_metadata_path(cfg, data_dir), schema)
    assignment = _load_split(cfg, records, schema)
    assignment.save(out / "split.csv")
    train_recs = [r for r in records if assignment.assignment[r.values[schema.id_column]] == "train"]
    if not train_recs:
        raise ConfigError("the split leaves the training partition empty")
    imputer = md.Imputer(schema, cfg["impute"]["mode"], cfg["seed"])
    imputer.fit([md.encode(r, schema) for r in train_recs])
    tcfg = _train_config(cfg)
    data = _assemble(records, schema, data_dir, imputer, load_sr=tcfg.sr_method == "file")
    train, val = data.partition(assignment, "train"), data.partition(assignment, "val")
    mcfg = ModelConfig(**cfg["model"], input_size=int(data.images.shape[1]),
                       meta_input_dim=schema.encoded_length, n_classes=len(schema.class_names),
                       seed=cfg["seed"])
    bundle = build_model(mcfg)
    bundle.extras = {
        "schema": schema.to_dict(),
        "class_names": schema.class_names,
        "imputer": imputer.state(),
        "preprocess": _preprocess_record(data_dir, cfg),
        "split": {"seed": assignment.seed, "ratios": assignment.ratios,
                  "assignment": assignment.assignment},
    }
    bundle.buffers.update(imputer.tensors())
    print(f"training {bundle.num_parameters} parameters on {len(train)} samples "
          f"(val {len(val)}) for {tcfg.epochs} epochs")
    result = fit(bundle, train, val, tcfg, LossConfig(**cfg["loss"]), out_dir=out)
    best = result.history[result.best_epoch]
    print(f"best epoch {result.best_epoch}: val BACC {best['val_bacc']:.4f}")
    return 0


def _assemble(records, schema, data_dir: Path, imputer, load_sr: bool = False):
    image_dir = data_dir / "images" if (data_dir / "images").is_dir() else data_dir
    try:
        return assemble(records, schema, image_dir, imputer, load_sr=load_sr)
    except ValueError as exc:
        if "same shape" in str(exc):
            raise ShapeError("images differ in size; run `lesionfuse preprocess` first") from exc
        raise


def _bundle_context(bundle):
    try:
        schema = md.MetadataSchema.from_dict(bundle.extras["schema"])
        imputer = md.Imputer.restore(schema, bundle.extras["imputer"], bundle.buffers)
    except KeyError as exc:
        raise SchemaError(f"checkpoint lacks the stored {exc} needed for inference") from exc
    return schema, imputer


def _checkpoint(cfg: dict):
    if not cfg["paths"]["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    path = Path(cfg["paths"]["checkpoint"])
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path, load_checkpoint(path)


def cmd_evaluate(cfg: dict, args) -> int:
    out = Path(cfg["paths"]["out"])
    _write_resolved(cfg, out)
    ckpt_path, bundle = _checkpoint(cfg)
    data_dir = _data_dir(cfg)
    schema, imputer = _bundle_context(bundle)
    records = md.parse_csv(_metadata_path(cfg, data_dir), schema)
    part = cfg["evaluate"]["partition"]
    if part != "all":
        assignment = _load_split(cfg, records, schema, bundle.extras.get("split"))
        records = [r for r in records if assignment.assignment[r.values[schema.id_column]] == part]
        if not records:
            raise ConfigError(f"partition {part!r} is empty")
    data = _assemble(records, schema, data_dir, imputer)
    if data.images.shape[1] != bundle.config.input_size:
        raise ShapeError(f"images are {data.images.shape[1]} px but the model expects "
                         f"{bundle.config.input_size} px")
    report = evaluate(bundle, data)
    write_report_files(report, out)
    export_embeddings(bundle, data, out / "embeddings.csv")
    if cfg["evaluate"]["figures"]:
        from .plotting import render_report

        history_file = ckpt_path.parent / "history.jsonl"
        history = [json.loads(line) for line in history_file.read_text().splitlines() if line] \
            if history_file.exists() else None
        render_report(report, out, history)
    auc = "n/a" if report.auc_macro is None else f"{report.auc_macro:.4f}"
    print(f"{part}: n={report.n_samples} ACC {report.acc:.4f} BACC {report.bacc:.4f} AUC {auc}")
    return 0


def _meta_values(spec: str) -> dict:
    text = Path(spec[1:]).read_text() if spec.startswith("@") else spec
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--meta-json is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError("--meta-json must be a JSON object of column -> value")
    return {k: None if v is None else str(v) for k, v in values.items()}


def predict_one(bundle, image: np.ndarray, values: dict) -> dict:
    schema, imputer = _bundle_context(bundle)
    record = md.make_record(values, schema, inference=True)
    meta = imputer.transform([md.encode(record, schema)])[0].vector
    pcfg = imaging.PreprocessConfig(**bundle.extras["preprocess"])
    # training images went through an 8-bit file; match that quantisation
    img = imaging.from_uint8(imaging.to_uint8(imaging.preprocess(image, pcfg)))
    if img.shape[0] != bundle.config.input_size:
        raise ShapeError(f"preprocessed image is {img.shape[0]} px, model expects "
                         f"{bundle.config.input_size}")
    with no_grad():
        out = forward(bundle, Tensor(img.transpose(2, 0, 1)[None].copy()),
                      Tensor(meta[None]), with_sr=False)
        probs = softmax(out.logits).data[0].astype(np.float64)
    names = bundle.extras.get("class_names", schema.class_names)
    return {"class": names[int(np.argmax(probs))],
            "probabilities": {n: float(p) for n, p in zip(names, probs)}}


def cmd_predict(cfg: dict, args) -> int:
    if cfg["paths"]["out"]:
        _write_resolved(cfg, Path(cfg["paths"]["out"]))
    _, bundle = _checkpoint(cfg)
    result = predict_one(bundle, imaging.load_image(args.image), _meta_values(args.meta_json))
    text = json.dumps(result, sort_keys=True)
    if cfg["paths"]["out"]:
        (Path(cfg["paths"]["out"]) / "prediction.json").write_text(text + "\n")
    print(text)
    return 0


# ----------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir")
    p.add_argument("--metadata", help="metadata CSV (default <data-dir>/metadata.csv)")
    p.add_argument("--schema", help="schema JSON (default <data-dir>/schema.json)")
    p.add_argument("--split-file", help="CSV sample_id,partition overriding the seeded split")


def _finite_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError("must be finite")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionfuse",
                                     description="Multimodal skin-lesion classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multimodal dataset")
    _common(p)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="colour constancy, CLAHE and resize")
    _common(p)
    _data_flags(p)
    p.add_argument("--input-size", type=int)
    p.add_argument("--paper-scale", action="store_true", help="resize to 224 px")
    p.add_argument("--skip-clahe", action="store_true")
    p.add_argument("--skip-color", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a preprocessed dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--sr-method", choices=("bilinear", "bicubic", "file"))
    p.add_argument("--fusion", choices=("multiply", "concat"))
    p.add_argument("--ce-form", choices=("as_written", "categorical"))
    p.add_argument("--alpha", type=_finite_float)
    p.add_argument("--beta", type=_finite_float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=_finite_float)
    p.add_argument("--impute", choices=("statistic", "autoencoder"))
    p.add_argument("--image-only", action="store_true", help="replace metadata features by ones")
    p.add_argument("--paper-scale", action="store_true", help="five-stage encoder for 224 px input")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics, ROC and embeddings for a checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", choices=md.PARTITIONS + ("all",))
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one image with its metadata")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--meta-json", required=True,
                   help="JSON object of column -> value, or @file.json")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, TypeError) as exc:
        print(f"lesionfuse {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(copy.deepcopy(cfg), args)
    except (LesionFuseError, OSError, ValueError) as exc:
        print(f"lesionfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
