"""Skeleton-only parametric body: forward kinematics and pinhole projection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import torch

from ..core import KeypointSchema, get_schema, load_resource

NUM_BODY_JOINTS = 23  # excluding the root
NUM_SHAPE = 20


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class BodyModel:
    """Rest joint table, kinematic tree and linear bone-length basis."""

    schema: KeypointSchema
    rest_joints: np.ndarray  # J x 3
    shape_basis: np.ndarray  # (J-1) x 20
    bend_components: tuple  # (theta index, sign)
    joint_limits: np.ndarray  # J x 3 x 2

    @property
    def parents(self) -> tuple:
        return self.schema.parent

    @property
    def num_joints(self) -> int:
        return self.schema.num_joints

    @property
    def bones(self) -> list:
        return [(p, i) for i, p in enumerate(self.parents) if p is not None]

    def rest_offsets(self) -> np.ndarray:
        off = self.rest_joints.copy()
        for i, p in enumerate(self.parents):
            if p is not None:
                off[i] = self.rest_joints[i] - self.rest_joints[p]
        return off


@lru_cache(maxsize=None)
def default_body() -> BodyModel:
    d = load_resource("smil23_body.json")
    schema = get_schema(d["skeleton"])
    bend = tuple((3 * schema.index(b["joint"]) + b["axis"], float(b["sign"]))
                 for b in d["bend_components"])
    return BodyModel(schema, np.array(d["rest_joints"], dtype=np.float64),
                     np.array(d["shape_basis"], dtype=np.float64), bend,
                     np.array(d["joint_limits"], dtype=np.float64))


@dataclass
class BodyPoseParams:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3 * (NUM_BODY_JOINTS + 1)))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_SHAPE))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BodyPoseParams":
        return cls(d["theta"], d["beta"])


@dataclass
class CameraParams:
    principal_point: tuple
    focal_length: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal length must be positive")
        self.principal_point = tuple(float(c) for c in self.principal_point)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def to_dict(self) -> dict:
        return {"principal_point": list(self.principal_point), "focal_length": self.focal_length,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple:
    """World->camera rotation and translation for a camera at ``eye`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


# ---------------------------------------------------------------------------
# rotations


def rodrigues(r: torch.Tensor, eps: float = 1e-16) -> torch.Tensor:
    """Axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3)."""
    angle = torch.sqrt((r * r).sum(-1, keepdim=True) + eps)
    axis = r / angle
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(r.shape[:-1] + (3, 3))
    s = torch.sin(angle)[..., None]
    c = torch.cos(angle)[..., None]
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand_as(k)
    return eye + s * k + (1 - c) * (k @ k)


def canonicalize_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Map every axis-angle triplet to the equivalent rotation with angle <= pi."""
    r = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    ang = np.linalg.norm(r, axis=1)
    big = ang > math.pi
    if big.any():
        a = ang[big]
        # same rotation: angle' = a - 2 pi k, reduced into (-pi, pi]
        wrapped = (a + math.pi) % (2 * math.pi) - math.pi
        r[big] = r[big] / a[:, None] * wrapped[:, None]
    return r.reshape(-1)


# ---------------------------------------------------------------------------
# forward kinematics


def bone_scales(beta, body: BodyModel):
    basis = torch.as_tensor(body.shape_basis, dtype=beta.dtype)
    return 1.0 + basis @ beta


def forward_kinematics_torch(theta: torch.Tensor, beta: torch.Tensor, body: BodyModel,
                             root_position: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Differentiable FK: joint i = parent position + parent rotation @ scaled rest bone."""
    rots = rodrigues(theta.reshape(-1, 3))
    scales = bone_scales(beta, body)
    offsets = torch.as_tensor(body.rest_offsets(), dtype=theta.dtype)
    root = offsets[0] if root_position is None else root_position
    glob_rot = [None] * body.num_joints
    pos = [None] * body.num_joints
    for i, p in enumerate(body.parents):
        if p is None:
            glob_rot[i] = rots[i]
            pos[i] = root
        else:
            pos[i] = pos[p] + glob_rot[p] @ (offsets[i] * scales[i - 1])
            glob_rot[i] = glob_rot[p] @ rots[i]
    return torch.stack(pos)


def forward_kinematics(theta, beta, skeleton: Optional[BodyModel] = None) -> np.ndarray:
    """3D joint positions (J x 3) for axis-angle pose ``theta`` and shape ``beta``."""
    body = skeleton or default_body()
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains NaN or infinite values")
    if theta.size != 3 * body.num_joints or beta.size != body.shape_basis.shape[1]:
        raise ValueError(f"expected theta of size {3 * body.num_joints} and beta of size "
                         f"{body.shape_basis.shape[1]}")
    out = forward_kinematics_torch(torch.from_numpy(theta), torch.from_numpy(beta), body)
    return out.numpy()


def to_camera(joints3d, cam: CameraParams):
    if isinstance(joints3d, torch.Tensor):
        rot = torch.as_tensor(cam.rotation, dtype=joints3d.dtype)
        return joints3d @ rot.T + torch.as_tensor(cam.translation, dtype=joints3d.dtype)
    return np.asarray(joints3d) @ cam.rotation.T + cam.translation


def project_pinhole(joints3d, cam: CameraParams, translation=None, joint_names=None):
    """Project world joints: (u, v) = (f x / z + cx, f y / z + cy) in the camera frame.

    ``translation`` optionally overrides the camera translation (a tensor while fitting).
    """
    is_torch = isinstance(joints3d, torch.Tensor)
    pc = to_camera(joints3d, cam)
    if translation is not None:
        pc = pc - torch.as_tensor(cam.translation, dtype=pc.dtype) + translation
    z = pc[:, 2]
    bad = (z <= 0).nonzero()[0] if not is_torch else torch.nonzero(z <= 0).flatten()
    if len(bad):
        j = int(bad[0])
        name = joint_names[j] if joint_names is not None and j < len(joint_names) else f"#{j}"
        raise ProjectionError(f"joint {name} is behind the camera (z={float(z[j]):.4g})")
    cx, cy = cam.principal_point
    f = cam.focal_length
    u = f * pc[:, 0] / z + cx
    v = f * pc[:, 1] / z + cy
    return torch.stack([u, v], dim=1) if is_torch else np.stack([u, v], axis=1)


def random_camera(rng: np.random.Generator, target, radius: float, img_size, focal_length: float,
                  max_azimuth_deg: float = 180.0, max_elevation_deg: float = 60.0,
                  fill: float = 0.8) -> CameraParams:
    """Camera on a viewing hemisphere around ``target`` with a fixed focal length."""
    w, h = img_size
    az = math.radians(rng.uniform(-max_azimuth_deg, max_azimuth_deg))
    el = math.radians(rng.uniform(0.0, max_elevation_deg))
    dist = focal_length * radius / (0.5 * fill * min(w, h)) + radius
    direction = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    rot, trans = look_at(np.asarray(target) + dist * direction, target)
    return CameraParams((w / 2.0, h / 2.0), focal_length, rot, trans)
