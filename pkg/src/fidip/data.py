"""COCO-format ingestion, top-down cropping, augmentation, heatmap targets and batching."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np
import torch

from .core import DataError, DomainLabel, KeypointAnnotation, KeypointSchema

logger = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class DatasetIndex:
    records: list  # (image path, KeypointAnnotation)
    skipped: list = field(default_factory=list)  # load report: (image path, reason)

    @property
    def domain_counts(self) -> tuple:
        n_syn = sum(1 for _, a in self.records if a.domain == DomainLabel.SYNTHETIC)
        return len(self.records) - n_syn, n_syn

    @property
    def domains(self) -> np.ndarray:
        return np.array([int(a.domain) for _, a in self.records], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.records)

    def __add__(self, other: "DatasetIndex") -> "DatasetIndex":
        return DatasetIndex(self.records + other.records, self.skipped + other.skipped)

    def subset(self, idx: Sequence[int]) -> "DatasetIndex":
        return DatasetIndex([self.records[i] for i in idx])


def load_coco_json(path, image_root, domain, check_images: bool = True) -> DatasetIndex:
    """Read a COCO keypoint file; one record per person instance.

    Records whose image is missing on disk are skipped and listed in
    ``DatasetIndex.skipped``.
    """
    domain = DomainLabel.parse(domain)
    raw = Path(path).read_bytes()
    try:
        coco = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at byte offset {e.pos}: {e.msg}") from e
    images = {img["id"]: img for img in coco.get("images", [])}
    image_root = Path(image_root)
    records, skipped = [], []
    for ann in coco.get("annotations", []):
        ann_id = ann.get("id")
        for key in ("keypoints", "image_id", "bbox"):
            if key not in ann:
                raise DataError(f"{path}: annotation id={ann_id} is missing {key!r}")
        img = images.get(ann["image_id"])
        if img is None:
            raise DataError(f"{path}: annotation id={ann_id} references unknown image_id "
                            f"{ann['image_id']}")
        img_path = image_root / img["file_name"]
        if check_images and not img_path.is_file():
            skipped.append((str(img_path), "missing image file"))
            continue
        bbox = ann["bbox"]
        area = ann.get("area", bbox[2] * bbox[3])
        records.append((str(img_path), KeypointAnnotation(
            image_id=ann["image_id"], keypoints=ann["keypoints"], bbox=bbox,
            area=area, domain=domain, id=ann_id)))
    if skipped:
        logger.warning("%s: skipped %d records with missing images", path, len(skipped))
    return DatasetIndex(records, skipped)


def load_manifest(path) -> DatasetIndex:
    """Load a manifest: a JSON list of {annotation_file, image_root, domain} entries."""
    path = Path(path)
    with open(path) as f:
        entries = json.load(f)
    if isinstance(entries, dict):
        entries = entries["datasets"]
    index = DatasetIndex([])
    for e in entries:
        ann = Path(e["annotation_file"])
        root = Path(e.get("image_root", ann.parent))
        if not ann.is_absolute():
            ann = path.parent / ann
        if not root.is_absolute():
            root = path.parent / root
        index = index + load_coco_json(ann, root, e["domain"])
    return index


# ---------------------------------------------------------------------------
# heatmaps

@dataclass
class HeatmapTensor:
    values: np.ndarray  # K x h x w
    sigma_px: float


def make_heatmap_targets(a, out_size, sigma_px: float, stride: float = 1.0):
    """Gaussian heatmap targets for one annotation.

    ``a`` is a KeypointAnnotation or a (K, 3) array; coordinates are divided by
    ``stride`` to reach heatmap pixels and the Gaussian is centred on the rounded
    location so each non-empty channel peaks at exactly 1.0.
    Returns (HeatmapTensor, target_weights).
    """
    if not sigma_px > 0:
        raise ValueError("sigma_px must be positive")
    kps = a.keypoints if isinstance(a, KeypointAnnotation) else np.asarray(a, dtype=np.float64)
    h, w = out_size
    k = kps.shape[0]
    values = np.zeros((k, h, w), dtype=np.float32)
    weights = np.zeros(k, dtype=np.float32)
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    for i, (x, y, v) in enumerate(kps):
        if v <= 0:
            continue
        mx = math.floor(x / stride + 0.5)
        my = math.floor(y / stride + 0.5)
        if not (0 <= mx < w and 0 <= my < h):
            continue
        values[i] = np.exp(-((xs - mx) ** 2 + (ys - my) ** 2) / (2 * sigma_px ** 2))
        weights[i] = 1.0
    return HeatmapTensor(values, float(sigma_px)), weights


# ---------------------------------------------------------------------------
# geometry

def box_to_center_scale(bbox, aspect_ratio: float, padding: float = 1.25):
    """Top-down crop box (SimpleBaseline convention): centre and (w, h) in pixels."""
    x, y, w, h = bbox
    center = np.array([x + w * 0.5, y + h * 0.5], dtype=np.float64)
    if w > aspect_ratio * h:
        h = w / aspect_ratio
    else:
        w = h * aspect_ratio
    return center, np.array([w, h], dtype=np.float64) * padding


def crop_transform(center, size, out_size) -> np.ndarray:
    """2x3 affine mapping the box (center, size=(w, h)) onto an output of (w, h) pixels."""
    out_w, out_h = out_size
    sx, sy = out_w / size[0], out_h / size[1]
    return np.array([[sx, 0.0, out_w * 0.5 - sx * center[0]],
                     [0.0, sy, out_h * 0.5 - sy * center[1]]])


def rotation_scale_transform(rotation_deg: float, scale: float, size) -> np.ndarray:
    """2x3 affine rotating by ``rotation_deg`` and scaling about the image centre."""
    w, h = size
    c = ((w - 1) * 0.5, (h - 1) * 0.5)
    return cv2.getRotationMatrix2D(c, rotation_deg, scale).astype(np.float64)


def affine_points(pts: np.ndarray, mat: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts[:, :2] @ mat[:, :2].T + mat[:, 2]


def compose_affine(second: np.ndarray, first: np.ndarray) -> np.ndarray:
    a = np.vstack([first, [0, 0, 1]])
    b = np.vstack([second, [0, 0, 1]])
    return (b @ a)[:2]


def invert_affine(mat: np.ndarray) -> np.ndarray:
    return cv2.invertAffineTransform(mat)


def transform_keypoints(kps: np.ndarray, mat: np.ndarray, size) -> np.ndarray:
    """Apply ``mat`` to labeled keypoints; those leaving the frame become (0, 0, 0)."""
    w, h = size
    out = np.zeros_like(kps, dtype=np.float64)
    lab = kps[:, 2] > 0
    if lab.any():
        xy = affine_points(kps[lab], mat)
        out[lab, :2] = xy
        out[lab, 2] = kps[lab, 2]
    inside = (out[:, 0] >= 0) & (out[:, 0] <= w - 1) & (out[:, 1] >= 0) & (out[:, 1] <= h - 1)
    out[~(lab & inside)] = 0.0
    return out


# ---------------------------------------------------------------------------
# samples

@dataclass
class TrainingSample:
    image: np.ndarray  # H x W x 3 float32, normalized
    keypoints: np.ndarray  # K x 3 in input-image pixels
    target_heatmaps: HeatmapTensor
    target_weights: np.ndarray
    domain: DomainLabel
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SampleConfig:
    input_size: tuple = (192, 256)  # (w, h)
    output_stride: int = 4
    sigma: float = 2.0
    padding: float = 1.25
    normalize: bool = True

    @property
    def heatmap_size(self) -> tuple:
        w, h = self.input_size
        return h // self.output_stride, w // self.output_stride


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def normalize_image(img: np.ndarray) -> np.ndarray:
    return ((img - IMAGENET_MEAN) / IMAGENET_STD).astype(np.float32)


def _with_targets(sample: TrainingSample, cfg: SampleConfig) -> TrainingSample:
    hm, weights = make_heatmap_targets(sample.keypoints, cfg.heatmap_size, cfg.sigma,
                                       stride=cfg.output_stride)
    return replace(sample, target_heatmaps=hm, target_weights=weights)


def crop_sample(image: np.ndarray, ann: KeypointAnnotation, cfg: SampleConfig) -> TrainingSample:
    """Cut the annotation's box out of ``image`` (RGB in [0, 1]) at the input resolution."""
    w, h = cfg.input_size
    center, size = box_to_center_scale(ann.bbox, w / h, cfg.padding)
    mat = crop_transform(center, size, cfg.input_size)
    patch = cv2.warpAffine(image, mat, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_REPLICATE)
    if cfg.normalize:
        patch = normalize_image(patch)
    kps = transform_keypoints(ann.keypoints, mat, cfg.input_size)
    sample = TrainingSample(patch.astype(np.float32), kps, None, None, ann.domain,
                            meta={"center": center, "size": size, "rotation": 0.0,
                                  "flipped": False, "transform": mat})
    return _with_targets(sample, cfg)


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    flip_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi) or self.max_rotation_deg < 0 or not 0 <= self.flip_prob <= 1:
            raise ValueError(f"invalid augmentation config {self}")


def rotate_flip(sample: TrainingSample, rotation_deg: float, scale: float, flip: bool,
                flip_perm: Optional[np.ndarray], cfg: SampleConfig) -> TrainingSample:
    """Deterministic part of augmentation: rotate/scale about the centre, then optionally flip."""
    h, w = sample.image.shape[:2]
    mat = rotation_scale_transform(rotation_deg, scale, (w, h))
    if flip:
        mat = compose_affine(np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]]), mat)
    if np.allclose(mat, [[1, 0, 0], [0, 1, 0]]):
        return sample
    image = cv2.warpAffine(sample.image, mat, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_REPLICATE)
    kps = transform_keypoints(sample.keypoints, mat, (w, h))
    if flip:
        if flip_perm is None:
            raise ValueError("flip requested without a flip permutation")
        kps = kps[flip_perm]
    meta = dict(sample.meta)
    meta["rotation"] = meta.get("rotation", 0.0) + rotation_deg
    meta["flipped"] = bool(meta.get("flipped", False)) ^ flip
    meta["transform"] = compose_affine(mat, meta.get("transform", np.eye(3)[:2]))
    out = replace(sample, image=image, keypoints=kps, meta=meta)
    return _with_targets(out, cfg)


def augment_affine_flip(sample: TrainingSample, config: AugmentConfig, rng: np.random.Generator,
                        schema: Optional[KeypointSchema] = None,
                        sample_cfg: Optional[SampleConfig] = None) -> TrainingSample:
    """Random rotation/scale/horizontal flip applied jointly to image, keypoints and targets."""
    sample_cfg = sample_cfg or SampleConfig(input_size=sample.image.shape[1::-1])
    rot = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)) \
        if config.max_rotation_deg > 0 else 0.0
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    flip = bool(rng.random() < config.flip_prob) if config.flip_prob > 0 else False
    perm = schema.flip_permutation() if schema is not None else None
    return rotate_flip(sample, rot, scale, flip, perm, sample_cfg)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    epoch: int
    indices: np.ndarray
    domains: np.ndarray


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Index batches for one epoch: a seeded permutation of ``range(n)`` cut into chunks."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if n == 0:
        return []
    if batch_size > n:
        logger.warning("batch size %d exceeds dataset size %d; using one batch of %d",
                       batch_size, n, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def hybrid_batch_sampler(index: DatasetIndex, batch_size: int, seed: int,
                         epochs: Optional[int] = None, start_epoch: int = 0) -> Iterator[Batch]:
    """Deterministic stream of batches; every epoch is a permutation of all records."""
    domains = index.domains
    epoch = start_epoch
    while epochs is None or epoch < start_epoch + epochs:
        for idx in epoch_batches(len(index), batch_size, seed, epoch):
            yield Batch(epoch, idx, domains[idx])
        epoch += 1


class SampleLoader:
    """Builds batch tensors from a DatasetIndex.

    Each sample depends only on (record, seed, epoch), so results are identical
    for any number of workers. Un-augmented crops are cached.
    """

    def __init__(self, index: DatasetIndex, sample_cfg: SampleConfig = SampleConfig(),
                 augment: Optional[AugmentConfig] = None, schema: Optional[KeypointSchema] = None,
                 seed: int = 0, workers: int = 0):
        self.index = index
        self.cfg = sample_cfg
        self.augment = augment
        self.schema = schema
        self.seed = seed
        self.workers = workers
        self._cache = {}

    def base_sample(self, i: int) -> TrainingSample:
        s = self._cache.get(i)
        if s is None:
            path, ann = self.index.records[i]
            s = crop_sample(read_image(path), ann, self.cfg)
            self._cache[i] = s
        return s

    def sample(self, i: int, epoch: int) -> TrainingSample:
        s = self.base_sample(i)
        if self.augment is not None:
            rng = np.random.default_rng([self.seed, epoch, i])
            s = augment_affine_flip(s, self.augment, rng, self.schema, self.cfg)
        return s

    def collate(self, indices: Sequence[int], epoch: int = 0) -> dict:
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                samples = list(ex.map(lambda i: self.sample(int(i), epoch), indices))
        else:
            samples = [self.sample(int(i), epoch) for i in indices]
        return {
            "images": torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2)
            .contiguous(),
            "heatmaps": torch.from_numpy(np.stack([s.target_heatmaps.values for s in samples])),
            "weights": torch.from_numpy(np.stack([s.target_weights for s in samples])),
            "domains": torch.tensor([int(s.domain) for s in samples], dtype=torch.float32),
            "indices": np.asarray(indices),
        }
