"""Pose-distribution statistics: per-limb orientation histograms and a diversity index."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..core import KeypointSchema, get_schema


def limb_angles(annotations, limbs) -> list:
    """Angle of every labeled limb w.r.t. the image x-axis, one array per limb."""
    out = [[] for _ in limbs]
    for a in annotations:
        kps = a.keypoints if hasattr(a, "keypoints") else np.asarray(a)
        for li, (p, c) in enumerate(limbs):
            if kps[p, 2] > 0 and kps[c, 2] > 0:
                out[li].append(np.arctan2(kps[c, 1] - kps[p, 1], kps[c, 0] - kps[p, 0]))
    return [np.asarray(v) for v in out]


def histogram_entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def angle_histograms(angles: Sequence[np.ndarray], bins: int = 36) -> dict:
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    hists = [np.histogram(np.mod(a + np.pi, 2 * np.pi) - np.pi, bins=edges)[0] for a in angles]
    ent = [histogram_entropy(h) for h in hists]
    return {"bin_edges": edges, "histograms": hists, "entropy": ent,
            "diversity_index": float(np.mean(ent)) if ent else 0.0}


def pose_distribution_stats(annotations, schema: Optional[KeypointSchema] = None,
                            bins: int = 36) -> dict:
    """Per-limb orientation histograms plus the mean per-limb entropy (nats)."""
    if not annotations:
        raise ValueError("pose_distribution_stats needs at least one annotation")
    schema = schema or get_schema("coco17")
    limbs = list(schema.limbs) or [(p, i) for i, p in enumerate(schema.parent) if p is not None]
    out = angle_histograms(limb_angles(annotations, limbs), bins)
    out["limbs"] = [[schema.joint_names[p], schema.joint_names[c]] for p, c in limbs]
    return out
