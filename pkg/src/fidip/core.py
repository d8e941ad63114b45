"""Shared keypoint types: schemas, annotations, validation and joint remapping."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration (schemas, joint maps, block names, config keys)."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class DomainLabel(enum.IntEnum):
    # synthetic is the positive class of the domain classifier
    REAL = 0
    SYNTHETIC = 1

    @classmethod
    def parse(cls, value: Union[str, int, "DomainLabel"]) -> "DomainLabel":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown domain {value!r}; expected REAL or SYNTHETIC") from None
        return cls(int(value))


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    joint_names: tuple
    flip_pairs: tuple
    oks_sigmas: tuple
    parent: tuple
    limbs: tuple = ()

    def __post_init__(self):
        k = len(self.joint_names)
        if k < 1:
            raise ConfigError(f"schema {self.name}: needs at least one joint")
        if len(self.oks_sigmas) != k or len(self.parent) != k:
            raise ConfigError(f"schema {self.name}: oks_sigmas/parent must have {k} entries")
        if any(not s > 0 for s in self.oks_sigmas):
            raise ConfigError(f"schema {self.name}: oks_sigmas must be positive")
        seen = set()
        for a, b in self.flip_pairs:
            if not (0 <= a < k and 0 <= b < k) or a == b or a in seen or b in seen:
                raise ConfigError(f"schema {self.name}: bad flip pair ({a}, {b})")
            seen.update((a, b))
        roots = [i for i, p in enumerate(self.parent) if p is None]
        if len(roots) != 1:
            raise ConfigError(f"schema {self.name}: expected exactly one root, found {len(roots)}")
        if any(p is not None and not 0 <= p < k for p in self.parent):
            raise ConfigError(f"schema {self.name}: parent index out of range")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def index(self, joint_name: str) -> int:
        return self.joint_names.index(joint_name)

    @classmethod
    def from_dict(cls, d: dict, name: Optional[str] = None) -> "KeypointSchema":
        return cls(
            name=name or d.get("name", "custom"),
            joint_names=tuple(d["joint_names"]),
            flip_pairs=tuple(tuple(p) for p in d.get("flip_pairs", [])),
            oks_sigmas=tuple(float(s) for s in d["oks_sigmas"]),
            parent=tuple(None if p is None or p < 0 else int(p) for p in d["parent"]),
            limbs=tuple(tuple(p) for p in d.get("limbs", [])),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "oks_sigmas": list(self.oks_sigmas),
            "parent": list(self.parent),
            "limbs": [list(p) for p in self.limbs],
        }

    @classmethod
    def load(cls, path: Union[str, Path]) -> "KeypointSchema":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_resource(name: str) -> dict:
    with resources.files("fidip.resources").joinpath(name).open() as f:
        return json.load(f)


def get_schema(name: str) -> KeypointSchema:
    """Return a bundled schema (``coco17`` or ``smil23``) or load one from a JSON path."""
    if name in ("coco17", "smil23"):
        return KeypointSchema.from_dict(load_resource(f"{name}.json"))
    if Path(name).is_file():
        return KeypointSchema.load(name)
    raise ConfigError(f"unknown keypoint schema {name!r}")


@dataclass(frozen=True)
class KeypointAnnotation:
    """A single person instance. ``keypoints`` is a K x 3 array of (x, y, v)."""

    image_id: Union[int, str]
    keypoints: np.ndarray
    bbox: tuple
    area: float
    domain: DomainLabel = DomainLabel.REAL
    id: Optional[int] = None

    def __post_init__(self):
        kps = np.array(self.keypoints, dtype=np.float64).reshape(-1, 3)
        kps.setflags(write=False)
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "bbox", tuple(float(b) for b in self.bbox))
        object.__setattr__(self, "domain", DomainLabel.parse(self.domain))

    @property
    def num_joints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2]

    @property
    def num_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())

    def to_coco(self) -> dict:
        d = {
            "image_id": self.image_id,
            "category_id": 1,
            "keypoints": [float(v) for v in self.keypoints.reshape(-1)],
            "num_keypoints": self.num_labeled,
            "bbox": list(self.bbox),
            "area": float(self.area),
            "iscrowd": 0,
        }
        if self.id is not None:
            d["id"] = self.id
        return d


def validate_annotation(a: KeypointAnnotation, schema: KeypointSchema,
                        img_size: Sequence[float]) -> list:
    """Return a list of human-readable violations; empty means the annotation is valid."""
    violations = []
    width, height = img_size
    if a.num_joints != schema.num_joints:
        violations.append(
            f"keypoints: count mismatch, got {a.num_joints} joints, schema "
            f"{schema.name} expects {schema.num_joints}")
    for i, (x, y, v) in enumerate(a.keypoints):
        if v not in (0, 1, 2):
            violations.append(f"keypoints[{i}].v: must be 0, 1 or 2, got {v}")
        elif v > 0 and not (0 <= x < width and 0 <= y < height):
            violations.append(
                f"keypoints[{i}]: out-of-bounds ({x:g}, {y:g}) for image {width}x{height}")
        if not (np.isfinite(x) and np.isfinite(y)):
            violations.append(f"keypoints[{i}]: non-finite coordinate")
    if len(a.bbox) != 4:
        violations.append("bbox: expected (x, y, w, h)")
    elif not (a.bbox[2] > 0 and a.bbox[3] > 0):
        violations.append(f"bbox: width and height must be positive, got {a.bbox[2:]}")
    if not a.area > 0:
        violations.append(f"area: must be positive, got {a.area}")
    return violations


@dataclass(frozen=True)
class JointMap:
    """Maps target joints to source joint indices (``None`` = absent in the source)."""

    source: str
    target: str
    indices: tuple = field(default_factory=tuple)

    @classmethod
    def from_dict(cls, d: dict) -> "JointMap":
        return cls(d["source"], d["target"], tuple(d["map"]))

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "JointMap":
        if path is None:
            return cls.from_dict(load_resource("smil23_to_coco17.json"))
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def inverse(self, num_source: int) -> "JointMap":
        inv = [None] * num_source
        for t, s in enumerate(self.indices):
            if s is not None:
                inv[s] = t
        return JointMap(self.target, self.source, tuple(inv))


def map_joints(src: np.ndarray, mapping: JointMap) -> np.ndarray:
    """Reorder a (J_src, 3) keypoint array into the mapping's target order.

    Absent target joints are emitted as (0, 0, 0).
    """
    src = np.asarray(src, dtype=np.float64)
    n_src = src.shape[0]
    out = np.zeros((len(mapping.indices), src.shape[1]), dtype=np.float64)
    for t, s in enumerate(mapping.indices):
        if s is None:
            continue
        if not 0 <= s < n_src:
            raise ConfigError(
                f"joint map {mapping.source}->{mapping.target}: target joint {t} references "
                f"source index {s}, but source has {n_src} joints")
        out[t] = src[s]
    return out
