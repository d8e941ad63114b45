"""Schematic image formation: anti-aliased stick figures over flat or image backgrounds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import cv2
import numpy as np

from ..core import DomainLabel, JointMap, KeypointAnnotation, map_joints
from .kinematics import BodyModel, BodyPoseParams, CameraParams, default_body, \
    forward_kinematics, project_pinhole

logger = logging.getLogger(__name__)


@dataclass
class SceneConfig:
    """Background (grey level, RGB triple, array or image path) and stick-figure appearance.

    ``blend="alpha"`` paints bones in ``color``; ``blend="additive"`` adds
    ``contrast`` on top of the background so the figure/background contrast does
    not depend on the background level. ``noise_std`` adds per-pixel Gaussian noise.
    """

    background: Union[None, float, tuple, str, np.ndarray] = 0.0
    color: tuple = (1.0, 1.0, 1.0)
    thickness_px: float = 2.0
    head_radius_px: float = 0.0
    blend: str = "alpha"
    contrast: float = 0.3
    noise_std: float = 0.0


def _background(scene: SceneConfig, img_size) -> np.ndarray:
    w, h = img_size
    bg = scene.background
    if bg is None:
        bg = 0.0
    if isinstance(bg, (str, Path)):
        img = cv2.imread(str(bg), cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(f"background image {bg} not found")
        img = cv2.cvtColor(cv2.resize(img, (w, h)), cv2.COLOR_BGR2RGB)
        return img.astype(np.float64) / 255.0
    if isinstance(bg, np.ndarray) and bg.ndim == 3:
        return cv2.resize(bg.astype(np.float64), (w, h))
    return np.ones((h, w, 3)) * np.asarray(bg, dtype=np.float64).reshape(-1)[None, None, :]


def _segment_coverage(pts: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    """Pixel coverage of a capsule (segment a-b with given radius), 1-px linear falloff."""
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
    return np.clip(radius + 0.5 - d, 0.0, 1.0)


def rasterize_bones(joints2d: np.ndarray, bones, img_size, thickness_px: float,
                    head: Optional[tuple] = None) -> np.ndarray:
    w, h = img_size
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    cov = np.zeros(len(pts))
    r = thickness_px / 2.0
    for p, c in bones:
        a, b = joints2d[p], joints2d[c]
        lo = np.minimum(a, b) - r - 1
        hi = np.maximum(a, b) + r + 1
        m = (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0]) & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1])
        if m.any():
            cov[m] = np.maximum(cov[m], _segment_coverage(pts[m], a, b, r))
    if head is not None:
        center, radius = head
        d = np.linalg.norm(pts - center, axis=1)
        cov = np.maximum(cov, np.clip(radius + 0.5 - d, 0.0, 1.0))
    return cov.reshape(h, w)


def annotation_from_projection(joints2d: np.ndarray, img_size, mapping: JointMap, image_id,
                               domain=DomainLabel.SYNTHETIC, ann_id=None,
                               bbox_margin: float = 0.1) -> KeypointAnnotation:
    """Map projected body joints to the annotation schema; out-of-image joints get v=0."""
    w, h = img_size
    inside = ((joints2d[:, 0] >= 0) & (joints2d[:, 0] <= w - 1)
              & (joints2d[:, 1] >= 0) & (joints2d[:, 1] <= h - 1))
    full = np.concatenate([joints2d, np.where(inside, 2.0, 0.0)[:, None]], axis=1)
    full[~inside, :2] = 0.0
    kps = map_joints(full, mapping)
    pts = joints2d[inside] if inside.any() else joints2d
    x0, y0 = pts.min(0)
    x1, y1 = pts.max(0)
    mx, my = bbox_margin * (x1 - x0 + 1), bbox_margin * (y1 - y0 + 1)
    x0, y0 = max(0.0, x0 - mx), max(0.0, y0 - my)
    x1, y1 = min(w - 1.0, x1 + mx), min(h - 1.0, y1 + my)
    bw, bh = max(x1 - x0, 1.0), max(y1 - y0, 1.0)
    return KeypointAnnotation(image_id, kps, (x0, y0, bw, bh), bw * bh, domain, ann_id)


def render_stick_figure(pose: BodyPoseParams, cam: CameraParams, scene: SceneConfig, img_size,
                        body: Optional[BodyModel] = None, mapping: Optional[JointMap] = None,
                        image_id=0, rng: Optional[np.random.Generator] = None,
                        domain=DomainLabel.SYNTHETIC) -> tuple:
    """Render ``pose`` seen by ``cam``; returns (H x W x 3 image in [0, 1], annotation)."""
    body = body or default_body()
    mapping = mapping or JointMap.load()
    joints = forward_kinematics(pose.theta, pose.beta, body)
    j2d = project_pinhole(joints, cam, joint_names=body.schema.joint_names)
    head = None
    if scene.head_radius_px > 0:
        head = (j2d[body.schema.index("head")], scene.head_radius_px)
    alpha = rasterize_bones(j2d, body.bones, img_size, scene.thickness_px, head)[..., None]
    bg = _background(scene, img_size)
    if scene.blend == "additive":
        img = bg + scene.contrast * alpha
    else:
        img = bg * (1 - alpha) + np.asarray(scene.color, dtype=np.float64) * alpha
    if scene.noise_std > 0:
        rng = rng or np.random.default_rng(0)
        img = img + rng.normal(0.0, scene.noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0)
    ann = annotation_from_projection(j2d, img_size, mapping, image_id, domain)
    return img, ann


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_coco(path, images: list, annotations: list, schema) -> None:
    coco = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "person", "keypoints": list(schema.joint_names),
                        "skeleton": [[a + 1, b + 1] for a, b in schema.limbs]}],
    }
    Path(path).write_text(json.dumps(coco, sort_keys=True))
