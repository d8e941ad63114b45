"""Command-line entry point: generate, train, eval, ablate, fit and stats subcommands.

Every command reads a JSON experiment config (``--config``), applies ``--set
section.key=value`` overrides, writes all outputs under ``--out`` together with a
``run.json`` manifest (resolved config, hash, seed), and logs to stderr.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import ConfigError, DataError, get_schema

logger = logging.getLogger("fidip")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "data": {
        "train_manifest": None,
        "test_manifest": None,
        "init_manifest": None,
        "schema": "coco17",
        "input_size": [192, 256],
        "output_stride": 4,
        "sigma": 2.0,
        "padding": 1.25,
        "augment": None,
    },
    "model": {
        "backbone": "reference",
        "pretrained": None,
        "domain_hidden": [256, 64],
        "options": {},
    },
    "train": {},
    "eval": {
        "manifest": None,
        "checkpoint": None,
        "detections": None,
        "probe_manifest": None,
        "probe_seeds": 3,
        "export_features": False,
        "max_dets": 20,
    },
    "synthgen": {"name": "synthetic"},
    "fit": {
        "annotations": None,
        "focal_length": 300.0,
        "max_iter": 200,
        "max_instances": None,
        "weights": {"pose": 0.01, "shape": 0.01, "bend": 0.01, "robust_sigma": 100.0},
        "prior_library_size": 64,
        "prior_components": 8,
    },
    "ablate": {"grid": {}, "evaluate": True},
}

# sections whose keys are validated by their own dataclass instead of DEFAULTS
_OPEN_SECTIONS = {"train", "synthgen"}
_OPEN_SUBKEYS = {("model", "options"), ("data", "augment"), ("ablate", "grid")}


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        top = path.split(".")[0] if path else k
        if k not in base and not (path and top in _OPEN_SECTIONS) \
                and tuple(path.rstrip(".").split(".")) not in _OPEN_SUBKEYS:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) \
                and (path.rstrip(".").split(".")[0], k) not in _OPEN_SUBKEYS:
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return cfg


@dataclasses.dataclass
class ExperimentConfig:
    """Resolved experiment configuration (defaults + file + overrides)."""

    content: dict

    @classmethod
    def build(cls, raw: Optional[dict] = None, overrides=(), seed: Optional[int] = None):
        raw = apply_overrides(raw or {}, overrides)
        if seed is not None:
            raw["seed"] = seed
        if "seed" in raw.get("train", {}):
            raise ConfigError("set the seed at the top level (or with --seed), not in train")
        content = _merge(DEFAULTS, raw)
        cfg = cls(content)
        cfg.train_config()  # validates the train section
        cfg.generate_config()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), seed=None) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON at byte offset {e.pos}: {e.msg}") from e
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.build(raw, overrides, seed)

    def __getitem__(self, key):
        return self.content[key]

    @property
    def seed(self) -> int:
        return int(self.content["seed"])

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def train_config(self):
        from .train import TrainConfig

        d = dict(self.content["train"])
        d["seed"] = self.seed
        return TrainConfig.from_dict(d)

    def generate_config(self):
        from .synthgen import GenerateConfig

        d = {k: v for k, v in self.content["synthgen"].items() if k != "name"}
        for key in ("img_size", "background_range"):
            if key in d:
                d[key] = tuple(d[key])
        return GenerateConfig.from_dict(d)

    def sample_config(self):
        from .data import SampleConfig

        d = self.content["data"]
        return SampleConfig(input_size=tuple(d["input_size"]), output_stride=d["output_stride"],
                            sigma=d["sigma"], padding=d["padding"])


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_run_manifest(out: Path, command: str, cfg: ExperimentConfig, extra=None):
    _write_json(out / "run.json", {"command": command, "config": cfg.content,
                                   "config_hash": cfg.config_hash, "seed": cfg.seed,
                                   "version": __version__, **(extra or {})})


# ---------------------------------------------------------------------------
# shared builders


def _manifests(value):
    if value is None:
        return []
    return [value] if isinstance(value, str) else list(value)


def load_index(value, what: str):
    from .data import DatasetIndex, load_manifest

    paths = _manifests(value)
    if not paths:
        raise ConfigError(f"{what} is not set")
    index = DatasetIndex([])
    for p in paths:
        if not Path(p).is_file():
            raise DataError(f"{what}: manifest {p} not found")
        index = index + load_manifest(p)
    return index


def build_model(cfg: ExperimentConfig):
    from .model import PoseModelBundle, load_pretrained
    import torch

    m = cfg["model"]
    schema = get_schema(cfg["data"]["schema"])
    torch.manual_seed(cfg.seed)
    options = dict(m["options"])
    if "widths" in options:
        options["widths"] = tuple(options["widths"])
    bundle = PoseModelBundle(schema.num_joints, tuple(cfg["data"]["input_size"]), m["backbone"],
                             tuple(m["domain_hidden"]), **options)
    if m["pretrained"]:
        missing = load_pretrained(bundle, m["pretrained"])
        logger.info("loaded pretrained weights (%d keys not provided)", len(missing))
    return bundle


def _train_loader(cfg: ExperimentConfig, index):
    from .data import AugmentConfig, SampleLoader

    aug = cfg["data"]["augment"]
    augment = None
    if aug:
        aug = dict(aug)
        if "scale_range" in aug:
            aug["scale_range"] = tuple(aug["scale_range"])
        augment = AugmentConfig(**aug)
    return SampleLoader(index, cfg.sample_config(), augment, get_schema(cfg["data"]["schema"]),
                        seed=cfg.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> dict:
    from .synthgen import generate_dataset

    summary = generate_dataset(cfg.generate_config(), out, seed=cfg.seed,
                               name=cfg["synthgen"].get("name", "synthetic"))
    write_run_manifest(out, "generate", cfg, {"summary": summary})
    if summary["violations"]:
        raise DataError(f"{summary['violations']} generated annotations failed validation")
    logger.info("wrote %d images to %s", summary["images"], out)
    return summary


def cmd_train(cfg: ExperimentConfig, out: Path, resume: bool = False) -> dict:
    from .train import run_fidip

    train_cfg = cfg.train_config()
    index = load_index(cfg["data"]["train_manifest"], "data.train_manifest")
    loader = _train_loader(cfg, index)
    init_data = None
    if cfg["data"]["init_manifest"]:
        init_data = load_index(cfg["data"]["init_manifest"], "data.init_manifest")
    bundle = build_model(cfg)
    payload = {k: cfg.content[k] for k in ("seed", "data", "model")}
    _, result = run_fidip(bundle, loader, train_cfg, out_dir=out, init_data=init_data,
                          resume=resume, hash_payload=payload)
    summary = {k: result[k] for k in ("finished", "cycles", "config_hash", "real_weight")}
    write_run_manifest(out, "train", cfg, {"summary": summary})
    return summary


def _load_trained(cfg: ExperimentConfig, checkpoint):
    from .model import load_checkpoint

    bundle = build_model(cfg)
    if not checkpoint:
        raise ConfigError("eval.checkpoint is not set")
    if not Path(checkpoint).is_file():
        raise DataError(f"checkpoint {checkpoint} not found")
    load_checkpoint(checkpoint, bundle)
    return bundle


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint=None) -> dict:
    from .data import SampleLoader
    from .evaluate import domain_confusion_score, export_features, extract_features, \
        load_detections, map_over_thresholds, predict, save_detections

    e = cfg["eval"]
    out.mkdir(parents=True, exist_ok=True)
    schema = get_schema(cfg["data"]["schema"])
    index = load_index(e["manifest"] or cfg["data"]["test_manifest"], "eval.manifest")
    gts = [a for _, a in index.records]
    bundle = None
    if e["detections"]:
        dets = load_detections(e["detections"])
    else:
        bundle = _load_trained(cfg, checkpoint or e["checkpoint"])
        dets = predict(bundle, SampleLoader(index, cfg.sample_config()))
        save_detections(dets, out / "detections.json")
    report = map_over_thresholds(dets, gts, schema.oks_sigmas, max_dets=e["max_dets"]).to_dict()
    if e["probe_manifest"]:
        bundle = bundle or _load_trained(cfg, checkpoint or e["checkpoint"])
        probe = SampleLoader(load_index(e["probe_manifest"], "eval.probe_manifest"),
                             cfg.sample_config())
        feats, doms, _ = extract_features(bundle, probe)
        scores = [domain_confusion_score(feats, doms, seed=s) for s in range(e["probe_seeds"])]
        report["domain_confusion"] = {"median": float(np.median(scores)), "runs": scores}
        if e["export_features"]:
            export_features(bundle, probe, out / "features.csv")
    _write_json(out / "eval_report.json", report)
    write_run_manifest(out, "eval", cfg, {"mAP": report["mAP"]})
    return report


def expand_grid(grid: dict) -> list:
    """Cartesian product of ``{"section.key": [values]}``; duplicates dropped with a warning."""
    if not grid:
        raise ConfigError("ablate.grid is empty")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"ablate.grid[{k!r}] must be a non-empty list")
    points, seen = [], set()
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        key = json.dumps(point, sort_keys=True)
        if key in seen:
            logger.warning("duplicate grid point %s dropped", key)
            continue
        seen.add(key)
        points.append(point)
    return points


def _point_config(cfg: ExperimentConfig, point: dict) -> ExperimentConfig:
    raw = copy.deepcopy(cfg.content)
    raw.pop("ablate")
    sets = [f"{k}={json.dumps(v)}" for k, v in point.items()]
    return ExperimentConfig.build(raw, sets)


def cmd_ablate(cfg: ExperimentConfig, out: Path) -> list:
    rows = []
    for point in expand_grid(cfg["ablate"]["grid"]):
        pcfg = _point_config(cfg, point)
        run_dir = out / pcfg.config_hash
        logger.info("grid point %s -> %s", point, run_dir)
        cmd_train(pcfg, run_dir / "train", resume=True)
        row = {"config_hash": pcfg.config_hash, **point}
        if cfg["ablate"]["evaluate"]:
            rep = cmd_eval(pcfg, run_dir / "eval", checkpoint=run_dir / "train" / "final.pt")
            row["mAP"] = rep["mAP"]
            if "domain_confusion" in rep:
                row["domain_confusion"] = rep["domain_confusion"]["median"]
        rows.append(row)
    _write_json(out / "ablation.json", rows)
    cols = sorted({k for r in rows for k in r}, key=lambda c: (c != "config_hash", c))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v
                        for k, v in r.items()})
    write_run_manifest(out, "ablate", cfg, {"rows": len(rows)})
    return rows


def _initial_camera(ann, focal: float, img_size, body):
    from .synthgen import CameraParams, forward_kinematics, look_at

    joints = forward_kinematics(np.zeros(3 * body.num_joints), np.zeros(body.shape_basis.shape[1]),
                                body)
    height = float(np.ptp(joints[:, 1]))
    x, y, w, h = ann.bbox
    dist = focal * height / max(h, w, 1.0)
    center = joints.mean(0)
    rot, trans = look_at(center + np.array([0.0, 0.0, dist]), center)
    cx, cy = img_size[0] / 2.0, img_size[1] / 2.0
    trans = trans + np.array([(x + w / 2 - cx) * dist / focal, (y + h / 2 - cy) * dist / focal,
                              0.0])
    return CameraParams((cx, cy), focal, rot, trans)


def cmd_fit(cfg: ExperimentConfig, out: Path) -> dict:
    """Lift 2D annotations to body poses; writes a pose library usable by ``generate``."""
    from .data import load_coco_json
    from .synthgen import BodyPoseParams, FitWeights, build_library, default_body, \
        fit_pose_prior, fit_pose_to_2d, save_library
    from .synthgen.fitting import annotation_to_body_target

    f = cfg["fit"]
    if not f["annotations"]:
        raise ConfigError("fit.annotations is not set")
    path = Path(f["annotations"])
    if not path.is_file():
        raise DataError(f"annotation file {path} not found")
    sizes = {img["id"]: (img.get("width"), img.get("height"))
             for img in json.loads(path.read_text()).get("images", [])}
    index = load_coco_json(path, path.parent, "REAL", check_images=False)
    body = default_body()
    prior = fit_pose_prior(build_library(f["prior_library_size"], seed=cfg.seed),
                           f["prior_components"], body, seed=cfg.seed)
    weights = FitWeights(**f["weights"])
    fitted, rows = [], []
    records = index.records[:f["max_instances"]] if f["max_instances"] else index.records
    for _, ann in records:
        target = annotation_to_body_target(ann, body=body)
        if int((target[:, 2] > 0).sum()) < 6:
            rows.append({"image_id": ann.image_id, "status": "skipped: fewer than 6 joints"})
            continue
        w, h = sizes.get(ann.image_id, (None, None))
        img_size = (w or ann.bbox[0] + ann.bbox[2], h or ann.bbox[1] + ann.bbox[3])
        cam = _initial_camera(ann, f["focal_length"], img_size, body)
        res = fit_pose_to_2d(target, BodyPoseParams(), cam, weights, prior, body,
                             max_iter=f["max_iter"])
        fitted.append(res.params)
        rows.append({"image_id": ann.image_id, "status": "ok", "loss": res.loss,
                     "reprojection_error_px": res.reprojection_error,
                     "iterations": res.iterations})
    out.mkdir(parents=True, exist_ok=True)
    save_library(fitted, out / "library.json")
    _write_json(out / "fit_report.json", rows)
    write_run_manifest(out, "fit", cfg, {"fitted": len(fitted)})
    return {"fitted": len(fitted), "rows": rows}


def cmd_stats(cfg: ExperimentConfig, out: Path) -> dict:
    from .synthgen import pose_distribution_stats

    schema = get_schema(cfg["data"]["schema"])
    result = {}
    for name in ("train_manifest", "test_manifest"):
        if not cfg["data"][name]:
            continue
        index = load_index(cfg["data"][name], f"data.{name}")
        if not index.records:
            raise DataError(f"data.{name} has no annotations")
        s = pose_distribution_stats([a for _, a in index.records], schema)
        result[name] = {"diversity_index": s["diversity_index"], "entropy": s["entropy"],
                        "limbs": s["limbs"], "bin_edges": s["bin_edges"],
                        "histograms": s["histograms"]}
    if not result:
        raise ConfigError("stats needs data.train_manifest and/or data.test_manifest")
    _write_json(out / "stats.json", result)
    write_run_manifest(out, "stats", cfg)
    return result


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fidip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in [("generate", "render a synthetic stick-figure dataset"),
                            ("train", "FiDIP or plain fine-tuning run"),
                            ("eval", "mAP over 10 OKS thresholds (+ domain probe)"),
                            ("ablate", "run a grid of train+eval configurations"),
                            ("fit", "lift 2D annotations to body poses"),
                            ("stats", "pose-distribution statistics of datasets")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override, e.g. train.lambda_grl=0.001")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from <out>/last.pt if present")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, help="overrides eval.checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = ExperimentConfig.load(args.config, args.overrides, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, checkpoint=args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.out)
        elif args.command == "fit":
            cmd_fit(cfg, args.out)
        else:
            cmd_stats(cfg, args.out)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        logger.exception("run failed: %s", e)
        return EXIT_RUNTIME
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
