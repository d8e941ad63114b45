"""Pose library handling and noisy pose sampling with plausibility rejection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fitting import PosePrior
from .kinematics import BodyModel, BodyPoseParams, NUM_SHAPE, canonicalize_axis_angle, \
    default_body, forward_kinematics


class RejectionError(RuntimeError):
    pass


def procedural_pose(rng: np.random.Generator, body: Optional[BodyModel] = None,
                    shape_std: float = 0.5) -> BodyPoseParams:
    """Uniform draw inside per-joint axis-angle limits (a stand-in library source)."""
    body = body or default_body()
    lim = body.joint_limits
    theta = rng.uniform(lim[..., 0], lim[..., 1]).reshape(-1)
    beta = np.clip(rng.normal(0.0, shape_std, NUM_SHAPE), -2.0, 2.0)
    return BodyPoseParams(theta, beta)


def build_library(n: int, seed: int = 0, body: Optional[BodyModel] = None,
                  max_attempts: int = 100) -> list:
    rng = np.random.default_rng(seed)
    body = body or default_body()
    out = []
    while len(out) < n:
        for _ in range(max_attempts):
            p = procedural_pose(rng, body)
            if self_intersection_depth(forward_kinematics(p.theta, p.beta, body), body) <= 0:
                out.append(p)
                break
        else:
            raise RejectionError("could not draw a non-intersecting procedural pose")
    return out


def save_library(library: Sequence[BodyPoseParams], path):
    Path(path).write_text(json.dumps([p.to_dict() for p in library]))


def load_library(path) -> list:
    return [BodyPoseParams.from_dict(d) for d in json.loads(Path(path).read_text())]


def _segment_distance(p1, q1, p2, q2) -> float:
    """Closest distance between segments p1-q1 and p2-q2."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-12 else 0.0
    t = (b * s + f) / e if e > 1e-12 else 0.0
    if t < 0.0:
        t, s = 0.0, np.clip(-c / a, 0.0, 1.0) if a > 1e-12 else 0.0
    elif t > 1.0:
        t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0) if a > 1e-12 else 0.0
    return float(np.linalg.norm((p1 + d1 * s) - (p2 + d2 * t)))


def self_intersection_depth(joints3d: np.ndarray, body: BodyModel,
                            limb_radius: float = 0.012) -> float:
    """Largest overlap between capsules of non-adjacent bones (<= 0 means no contact)."""
    bones = body.bones
    worst = -np.inf
    for i in range(len(bones)):
        for j in range(i + 1, len(bones)):
            if set(bones[i]) & set(bones[j]):
                continue
            # bones hanging off a common joint are allowed to touch
            pi, pj = body.parents[bones[i][0]], body.parents[bones[j][0]]
            if bones[i][0] == bones[j][0] or pi == bones[j][0] or pj == bones[i][0]:
                continue
            d = _segment_distance(joints3d[bones[i][0]], joints3d[bones[i][1]],
                                  joints3d[bones[j][0]], joints3d[bones[j][1]])
            worst = max(worst, 2 * limb_radius - d)
    return worst


@dataclass(frozen=True)
class RejectionConfig:
    prior_nll_cutoff: Optional[float] = None  # reject if -log density exceeds this
    limb_radius: float = 0.012
    check_intersection: bool = True
    max_rejections: int = 1000


def sample_pose(library: Sequence[BodyPoseParams], noise_std: float, rng: np.random.Generator,
                prior: Optional[PosePrior] = None, rejection: RejectionConfig = RejectionConfig(),
                body: Optional[BodyModel] = None) -> BodyPoseParams:
    """Pick a library pose uniformly, add Gaussian noise per component, reject implausible draws."""
    if not library:
        raise ValueError("pose library is empty")
    body = body or default_body()
    for _ in range(rejection.max_rejections):
        base = library[int(rng.integers(len(library)))]
        theta = base.theta + rng.normal(0.0, noise_std, base.theta.shape) if noise_std > 0 \
            else base.theta.copy()
        if noise_std > 0:
            theta = canonicalize_axis_angle(theta)
        cand = BodyPoseParams(theta, base.beta.copy())
        if prior is not None and rejection.prior_nll_cutoff is not None:
            if float(prior.neg_log_density(theta[3:])) > rejection.prior_nll_cutoff:
                continue
        if rejection.check_intersection:
            joints = forward_kinematics(theta, cand.beta, body)
            if self_intersection_depth(joints, body, rejection.limb_radius) > 0:
                continue
        return cand
    raise RejectionError(f"{rejection.max_rejections} consecutive samples rejected; "
                         f"try a lower noise_std (currently {noise_std})")
