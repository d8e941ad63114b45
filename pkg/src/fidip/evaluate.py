"""OKS / AP / mAP evaluation, heatmap decoding, domain-confusion probe and feature export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .core import DataError, KeypointAnnotation
from .data import SampleLoader, invert_affine
from .model import DomainClassifier, PoseModelBundle

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
# OKS values are compared against decimal thresholds; absorb float representation noise
THRESHOLD_SLACK = 1e-9


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given input (no labeled joints, no ground truth)."""


@dataclass
class Detection:
    image_id: Union[int, str]
    keypoints: np.ndarray  # K x 3 (x, y, confidence)
    score: float

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.score = float(self.score)
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_coco(self) -> dict:
        return {"image_id": self.image_id, "category_id": 1,
                "keypoints": [float(v) for v in self.keypoints.reshape(-1)],
                "score": self.score}


def oks_terms(det_xy: np.ndarray, gt: KeypointAnnotation, sigmas: Sequence[float]) -> np.ndarray:
    """Per-joint similarity exp(-d^2 / (2 s^2 k^2)) with k = 2 sigma and s^2 = area.

    Unlabeled joints are returned as NaN.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    k2 = (2.0 * sigmas) ** 2
    g = gt.keypoints
    d2 = (det_xy[:, 0] - g[:, 0]) ** 2 + (det_xy[:, 1] - g[:, 1]) ** 2
    terms = np.exp(-d2 / (2.0 * gt.area * k2))
    terms[g[:, 2] <= 0] = np.nan
    return terms


def oks(det: Detection, gt: KeypointAnnotation, sigmas: Sequence[float]) -> float:
    """Object keypoint similarity of one detection against one ground-truth instance."""
    if gt.num_labeled == 0:
        raise UndefinedMetricError(f"ground truth for image {gt.image_id} has no labeled joints")
    if det.keypoints.shape[0] != gt.num_joints or len(sigmas) != gt.num_joints:
        raise ValueError("detection, ground truth and sigmas disagree on joint count")
    return float(np.nanmean(oks_terms(det.keypoints[:, :2], gt, sigmas)))


def oks_matrix(dets: Sequence[Detection], gts: Sequence[KeypointAnnotation], sigmas) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = oks(d, g, sigmas)
    return out


def score_order(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")


def match_detections(dets: Sequence[Detection], gts: Sequence[KeypointAnnotation],
                     threshold: float, sigmas=None, ious: Optional[np.ndarray] = None) -> dict:
    """Greedy matching for one image.

    Detections are visited by descending score; each takes the still-unmatched
    ground truth with the highest OKS, provided that OKS reaches ``threshold``.
    Returns ``det_match`` (gt index or -1, in input order), ``gt_match`` and counts.
    """
    if ious is None:
        ious = oks_matrix(dets, gts, sigmas)
    det_match = np.full(len(dets), -1, dtype=np.int64)
    gt_match = np.full(len(gts), -1, dtype=np.int64)
    for d in score_order([x.score for x in dets]):
        best, best_j = threshold - THRESHOLD_SLACK, -1
        for j in range(len(gts)):
            if gt_match[j] >= 0:
                continue
            if ious[d, j] >= best:
                best, best_j = ious[d, j], j
        if best_j >= 0:
            det_match[d] = best_j
            gt_match[best_j] = d
    tp = int((det_match >= 0).sum())
    return {"det_match": det_match, "gt_match": gt_match, "tp": tp,
            "fp": len(dets) - tp, "fn": len(gts) - tp}


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-ranked true/false positive flags."""
    if num_gt <= 0:
        raise UndefinedMetricError("average precision is undefined without ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = score_order(scores)
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.spacing(1))
    # precision envelope, non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


@dataclass
class EvalReport:
    ap_per_threshold: dict
    mAP: float
    per_keypoint_mean_oks_term: list
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
                "mAP": self.mAP, "per_keypoint_mean_oks_term": self.per_keypoint_mean_oks_term,
                "counts": self.counts}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _group(items, key):
    out = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def map_over_thresholds(dets: Sequence[Detection], gts: Sequence[KeypointAnnotation], sigmas,
                        thresholds: Sequence[float] = OKS_THRESHOLDS,
                        max_dets: int = 20) -> EvalReport:
    """COCO-style keypoint AP at each OKS threshold and their mean."""
    gts = [g for g in gts if g.num_labeled > 0]
    num_gt = len(gts)
    if num_gt == 0:
        raise UndefinedMetricError("no ground-truth instances with labeled joints")
    gts_by_img = _group(gts, lambda g: g.image_id)
    dets_by_img = _group(dets, lambda d: d.image_id)
    per_image = []
    k = gts[0].num_joints
    term_sum, term_n = np.zeros(k), np.zeros(k)
    for img, img_dets in dets_by_img.items():
        img_dets = [img_dets[i] for i in score_order([d.score for d in img_dets])[:max_dets]]
        img_gts = gts_by_img.get(img, [])
        ious = oks_matrix(img_dets, img_gts, sigmas)
        per_image.append((img_dets, img_gts, ious))
    for img, img_gts in gts_by_img.items():
        img_dets = dets_by_img.get(img, [])
        for g in img_gts:
            if not img_dets:
                continue
            best = max(img_dets, key=lambda d: oks(d, g, sigmas))
            terms = oks_terms(best.keypoints[:, :2], g, sigmas)
            lab = ~np.isnan(terms)
            term_sum[lab] += terms[lab]
            term_n[lab] += 1
    aps = {}
    for t in thresholds:
        scores, flags = [], []
        for img_dets, img_gts, ious in per_image:
            m = match_detections(img_dets, img_gts, t, ious=ious)
            scores += [d.score for d in img_dets]
            flags += list(m["det_match"] >= 0)
        aps[t] = average_precision(scores, flags, num_gt)
    per_kp = [float(s / n) if n else None for s, n in zip(term_sum, term_n)]
    return EvalReport(aps, float(np.mean(list(aps.values()))), per_kp,
                      {"gt": num_gt, "detections": len(dets), "images": len(gts_by_img)})


# ---------------------------------------------------------------------------
# COCO json io


def load_detections(path) -> list:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at byte offset {e.pos}: {e.msg}") from e
    return [Detection(r["image_id"], r["keypoints"], r.get("score", 1.0)) for r in raw]


def save_detections(dets: Sequence[Detection], path):
    Path(path).write_text(json.dumps([d.to_coco() for d in dets]))


# ---------------------------------------------------------------------------
# inference


def decode_heatmaps(heatmaps: np.ndarray) -> tuple:
    """Argmax locations with a quarter-pixel shift toward the larger neighbour.

    ``heatmaps`` is N x K x h x w; returns (coords N x K x 2 in heatmap pixels, maxvals N x K).
    """
    n, k, h, w = heatmaps.shape
    flat = heatmaps.reshape(n, k, -1)
    idx = flat.argmax(axis=2)
    maxvals = flat.max(axis=2)
    coords = np.stack([idx % w, idx // w], axis=-1).astype(np.float64)
    for i in range(n):
        for j in range(k):
            hm = heatmaps[i, j]
            px, py = int(coords[i, j, 0]), int(coords[i, j, 1])
            if 0 < px < w - 1 and 0 < py < h - 1:
                coords[i, j, 0] += 0.25 * np.sign(hm[py, px + 1] - hm[py, px - 1])
                coords[i, j, 1] += 0.25 * np.sign(hm[py + 1, px] - hm[py - 1, px])
    return coords, maxvals


@torch.no_grad()
def predict(bundle: PoseModelBundle, loader: SampleLoader, batch_size: int = 64) -> list:
    """Top-down inference on ground-truth boxes; one Detection per record, image coordinates."""
    bundle.eval()
    stride = loader.cfg.output_stride
    dets = []
    n = len(loader.index)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        batch = loader.collate(idx)
        hm = bundle(batch["images"]).numpy()
        coords, maxvals = decode_heatmaps(hm)
        for b, i in enumerate(idx):
            s = loader.base_sample(int(i))
            inv = invert_affine(s.meta["transform"])
            xy = coords[b] * stride
            xy = xy @ inv[:, :2].T + inv[:, 2]
            kps = np.concatenate([xy, maxvals[b][:, None]], axis=1)
            ann = loader.index.records[int(i)][1]
            dets.append(Detection(ann.image_id, kps, float(maxvals[b].mean())))
    return dets


@torch.no_grad()
def extract_features(bundle: PoseModelBundle, loader: SampleLoader, batch_size: int = 64) -> tuple:
    """Globally pooled extractor features, domain labels and image ids for every record."""
    bundle.eval()
    feats, doms = [], []
    n = len(loader.index)
    for start in range(0, n, batch_size):
        batch = loader.collate(np.arange(start, min(n, start + batch_size)))
        feats.append(bundle.pooled(bundle.forward_features(batch["images"])))
        doms.append(batch["domains"])
    if not feats:
        c = bundle.feature_channels
        return np.zeros((0, c), np.float32), np.zeros(0, np.int64), []
    ids = [a.image_id for _, a in loader.index.records]
    return (torch.cat(feats).numpy(), torch.cat(doms).numpy().astype(np.int64), ids)


def export_features(bundle: PoseModelBundle, loader: SampleLoader, path) -> np.ndarray:
    """Write pooled features as CSV (image_id, domain, f0..fC-1); returns the matrix."""
    feats, doms, ids = extract_features(bundle, loader)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "domain"] + [f"f{i}" for i in range(feats.shape[1])])
        for img_id, d, row in zip(ids, doms, feats):
            w.writerow([img_id, int(d)] + [repr(float(v)) for v in row])
    return feats


# ---------------------------------------------------------------------------
# domain-confusion probe


def stratified_split(labels: np.ndarray, train_frac: float, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(train_frac * len(idx)))
        tr.append(idx[:cut])
        te.append(idx[cut:])
    return np.concatenate(tr), np.concatenate(te)


def domain_confusion_score(features, labels, split: float = 0.5, seed: int = 0,
                           hidden=(256, 64), epochs: int = 300, lr: float = 1e-3,
                           bundle: Optional[PoseModelBundle] = None) -> float:
    """Held-out accuracy of a freshly initialised 3-FC probe trained to tell domains apart.

    ``features`` is an (N, C) array of pooled features, or a SampleLoader whose
    images are run through ``bundle`` first. Values near the majority-class prior
    mean the domains are indistinguishable.
    """
    if isinstance(features, SampleLoader):
        if bundle is None:
            raise ValueError("a bundle is needed to extract features from images")
        features, labels, _ = extract_features(bundle, features)
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("domain_confusion_score needs samples from both domains")
    tr, te = stratified_split(y, split, seed)
    mu = x[tr].mean(0)
    sd = x[tr].std(0) + 1e-6
    x = (x - mu) / sd
    gen = torch.Generator().manual_seed(seed)
    probe = DomainClassifier(x.shape[1], hidden).double()
    with torch.no_grad():
        for p in probe.parameters():
            bound = 1.0 / math.sqrt(p.shape[-1]) if p.dim() > 1 else 0.05
            p.uniform_(-bound, bound, generator=gen)
    xt = torch.from_numpy(x)
    yt = torch.from_numpy(y).double()
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(probe(xt[tr]), yt[tr])
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (probe(xt[te]) > 0).long().numpy()
    return float((pred == y[te]).mean())
