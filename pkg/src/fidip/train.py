"""Losses and the initialization / two-stage circular FiDIP training loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import ConfigError, DomainLabel
from .data import DatasetIndex, SampleConfig, SampleLoader, epoch_batches
from .model import PoseModelBundle, Stage, atomic_write_bytes, checksums, load_checkpoint, \
    save_checkpoint

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


def domain_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy of synthetic-domain logits, evaluated in log-sum-exp form."""
    labels = labels.to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="mean")


def domain_scale(domains: torch.Tensor, real_weight: float) -> torch.Tensor:
    real = domains.to(torch.int64) == int(DomainLabel.REAL)
    return torch.where(real, torch.as_tensor(real_weight, dtype=torch.float64),
                       torch.as_tensor(1.0, dtype=torch.float64))


def per_sample_pose_error(pred: torch.Tensor, target: torch.Tensor,
                          weights: torch.Tensor) -> torch.Tensor:
    """Mean squared heatmap error over the weighted channels of each sample (0 if none)."""
    sq = (pred - target).pow(2).mean(dim=(2, 3))  # N x K
    w = weights.to(sq.dtype)
    n_w = w.sum(dim=1)
    return (sq * w).sum(dim=1) / n_w.clamp(min=1.0)


def pose_loss(pred: torch.Tensor, target: torch.Tensor, target_weights: torch.Tensor,
              domains: torch.Tensor, real_weight: float) -> torch.Tensor:
    """Domain-scaled heatmap MSE: real samples count ``real_weight`` times, synthetic once."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    err = per_sample_pose_error(pred, target, target_weights)
    scale = domain_scale(domains, real_weight).to(err.dtype)
    return (scale * err).mean()


def total_loss(l_pose, l_domain, lambda_grl: float):
    """Value of the adversarial objective L_P - lambda * L_D.

    Training never backpropagates this expression directly: the extractor sees
    ``-lambda * dL_D`` through the gradient reversal layer instead.
    """
    return l_pose - lambda_grl * l_domain


@dataclass
class LossBreakdown:
    L_P: Optional[float] = None
    L_D: Optional[float] = None
    L_total: Optional[float] = None
    per_domain_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


def _counts(domains: torch.Tensor) -> dict:
    n_syn = int((domains > 0.5).sum())
    return {"REAL": int(domains.numel()) - n_syn, "SYNTHETIC": n_syn}


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    mode: str = "fidip"  # fidip | finetune
    lr: float = 0.001
    init_batch_size: int = 128
    init_epochs: int = 1
    batch_size: int = 64
    epochs: int = 100
    lambda_grl: float = 0.0005
    real_weight: Optional[float] = None  # None -> n_synthetic / n_real
    frozen_blocks: tuple = ("res1", "res2", "res3")
    stage_granularity: str = "per_epoch"  # per_epoch | per_n_batches
    stage_n_batches: int = 1
    seed: int = 0

    def __post_init__(self):
        self.frozen_blocks = tuple(self.frozen_blocks)
        if self.mode not in ("fidip", "finetune"):
            raise ConfigError(f"train.mode must be 'fidip' or 'finetune', got {self.mode!r}")
        if self.stage_granularity not in ("per_epoch", "per_n_batches"):
            raise ConfigError(f"unknown stage_granularity {self.stage_granularity!r}")
        for name in ("lr", "init_batch_size", "init_epochs", "batch_size", "epochs",
                     "stage_n_batches"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lambda_grl < 0:
            raise ConfigError("train.lambda_grl must be >= 0")
        if self.real_weight is not None and self.real_weight < 1:
            raise ConfigError("train.real_weight must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frozen_blocks"] = list(self.frozen_blocks)
        return d


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dict_diff(a: dict, b: dict, prefix="") -> list:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _dict_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: {va!r} != {vb!r}")
    return out


# ---------------------------------------------------------------------------
# stages


def _as_loader(data, bundle: PoseModelBundle) -> SampleLoader:
    if isinstance(data, SampleLoader):
        return data
    if isinstance(data, DatasetIndex):
        cfg = SampleConfig(input_size=bundle.input_size, output_stride=bundle.output_stride)
        return SampleLoader(data, cfg)
    raise TypeError(f"expected SampleLoader or DatasetIndex, got {type(data).__name__}")


def stage1_step(bundle: PoseModelBundle, batch: dict, optimizer) -> LossBreakdown:
    """One domain-classifier update on locked features."""
    with torch.no_grad():
        feats = bundle.pooled(bundle.forward_features(batch["images"]))
    logits = bundle.domain_head(feats)
    loss = domain_loss(logits, batch["domains"])
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return LossBreakdown(L_D=float(loss.detach()), per_domain_counts=_counts(batch["domains"]))


def stage2_step(bundle: PoseModelBundle, batch: dict, optimizer, lambda_grl: float,
                real_weight: float, adversarial: bool = True) -> LossBreakdown:
    """One pose-network update; with ``adversarial`` the domain loss is reversed into the extractor."""
    feats = bundle.forward_features(batch["images"])
    pred = bundle.forward_pose(feats)
    l_p = pose_loss(pred, batch["heatmaps"], batch["weights"], batch["domains"], real_weight)
    objective = l_p
    l_d = None
    if adversarial:
        logits = bundle.forward_domain(feats, lambda_grl)
        l_d = domain_loss(logits, batch["domains"])
        objective = l_p + l_d
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    optimizer.step()
    if l_d is None:
        return LossBreakdown(L_P=float(l_p.detach()), L_total=float(l_p.detach()),
                             per_domain_counts=_counts(batch["domains"]))
    lp, ld = float(l_p.detach()), float(l_d.detach())
    return LossBreakdown(L_P=lp, L_D=ld, L_total=total_loss(lp, ld, lambda_grl),
                         per_domain_counts=_counts(batch["domains"]))


def train_stage1(bundle: PoseModelBundle, batches: Iterable[dict], cfg: TrainConfig,
                 optimizer=None) -> tuple:
    """Stage I: pose network locked, domain classifier trained on infant real/synthetic features."""
    bundle.apply_freeze_mask(Stage.STAGE1, cfg.frozen_blocks)
    bundle.train()
    optimizer = optimizer or torch.optim.Adam(bundle.domain_head.parameters(), lr=cfg.lr)
    history = [stage1_step(bundle, b, optimizer) for b in batches]
    return bundle, history


def stage2_parameters(bundle: PoseModelBundle, frozen_blocks: Sequence[str]) -> list:
    params = list(bundle.pose_head.parameters())
    for name, block in bundle.extractor.items():
        if name not in frozen_blocks:
            params += list(block.parameters())
    return params


def train_stage2(bundle: PoseModelBundle, batches: Iterable[dict], cfg: TrainConfig,
                 real_weight: float = 1.0, optimizer=None, adversarial: bool = True) -> tuple:
    """Stage II: domain classifier locked, pose network minimises L_P - lambda L_D via the GRL."""
    bundle.apply_freeze_mask(Stage.STAGE2, cfg.frozen_blocks)
    bundle.train()
    optimizer = optimizer or torch.optim.Adam(stage2_parameters(bundle, cfg.frozen_blocks),
                                              lr=cfg.lr)
    history = [stage2_step(bundle, b, optimizer, cfg.lambda_grl, real_weight, adversarial)
               for b in batches]
    return bundle, history


def init_domain_classifier(bundle: PoseModelBundle, adult_real, adult_synthetic,
                           cfg: TrainConfig, optimizer=None, history: Optional[list] = None):
    """Initialization session: fit only the domain classifier on a real + synthetic set.

    ``adult_real`` / ``adult_synthetic`` are DatasetIndex objects (or SampleLoaders
    sharing one sample config); the extractor and pose head stay locked.
    """
    if isinstance(adult_real, SampleLoader):
        loader = SampleLoader(adult_real.index + _index_of(adult_synthetic), adult_real.cfg,
                              seed=adult_real.seed)
    else:
        loader = _as_loader(adult_real + adult_synthetic, bundle)
    if len(loader.index) == 0:
        raise ConfigError("initialization session needs a non-empty real + synthetic set")
    bundle.apply_freeze_mask(Stage.INIT)
    bundle.train()
    optimizer = optimizer or torch.optim.Adam(bundle.domain_head.parameters(), lr=cfg.lr)
    n = len(loader.index)
    bs = max(2, min(cfg.init_batch_size, n))
    for epoch in range(cfg.init_epochs):
        for idx in epoch_batches(n, bs, cfg.seed + 7919, epoch):
            rec = stage1_step(bundle, loader.collate(idx, epoch), optimizer)
            if history is not None:
                history.append(rec)
    return bundle


def _index_of(x) -> DatasetIndex:
    return x.index if isinstance(x, SampleLoader) else x


# ---------------------------------------------------------------------------
# circular schedule


def cycle_schedule(n_records: int, cfg: TrainConfig) -> list:
    """Flat list of (epoch, batch index lists) cycles for the formal session."""
    cycles = []
    for epoch in range(cfg.epochs):
        batches = epoch_batches(n_records, cfg.batch_size, cfg.seed, epoch)
        if cfg.stage_granularity == "per_epoch":
            cycles.append((epoch, batches))
        else:
            for i in range(0, len(batches), cfg.stage_n_batches):
                cycles.append((epoch, batches[i:i + cfg.stage_n_batches]))
    return cycles


def _mean_breakdown(history: list, lambda_grl: float) -> dict:
    out = {}
    for key in ("L_P", "L_D", "L_total"):
        vals = [getattr(h, key) for h in history if getattr(h, key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    counts = {"REAL": 0, "SYNTHETIC": 0}
    for h in history:
        for k, v in h.per_domain_counts.items():
            counts[k] += v
    out["per_domain_counts"] = counts
    return out


class FiDIPTrainer:
    """Owns the optimizers and the report for one training run."""

    def __init__(self, bundle: PoseModelBundle, dataset, cfg: TrainConfig,
                 out_dir: Union[str, Path, None] = None, init_data=None,
                 hash_payload: Optional[dict] = None):
        self.bundle = bundle
        self.loader = _as_loader(dataset, bundle)
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.init_data = init_data
        n_real, n_syn = self.loader.index.domain_counts
        if cfg.real_weight is not None:
            self.real_weight = float(cfg.real_weight)
        else:
            self.real_weight = float(n_syn / n_real) if n_real and n_syn else 1.0
            self.real_weight = max(self.real_weight, 1.0)
        self.hashed_config = {"train": cfg.to_dict(), **(hash_payload or {})}
        self.config_hash = config_hash(self.hashed_config)
        self.opt_d = torch.optim.Adam(bundle.domain_head.parameters(), lr=cfg.lr)
        self.opt_p = torch.optim.Adam(stage2_parameters(bundle, cfg.frozen_blocks), lr=cfg.lr)
        self.report: list = []
        self.next_cycle = 0
        self.initialized = False
        self.schedule = cycle_schedule(len(self.loader.index), cfg)

    @property
    def adversarial(self) -> bool:
        return self.cfg.mode == "fidip"

    # -- persistence

    @property
    def checkpoint_path(self) -> Optional[Path]:
        return self.out_dir / "last.pt" if self.out_dir else None

    def _meta(self, stage: str, epoch: int) -> dict:
        return {"stage": stage, "epoch": epoch, "config_hash": self.config_hash,
                "schema_name": getattr(self.loader.schema, "name", None),
                "config": self.hashed_config, "backbone": self.bundle.backbone_name}

    def save(self, path=None, stage="STAGE2", epoch=0):
        path = path or self.checkpoint_path
        extra = {"opt_d": self.opt_d.state_dict(), "opt_p": self.opt_p.state_dict(),
                 "report": self.report, "next_cycle": self.next_cycle,
                 "initialized": self.initialized, "real_weight": self.real_weight}
        save_checkpoint(path, self.bundle, self._meta(stage, epoch), extra)

    def resume(self, path=None) -> bool:
        path = Path(path or self.checkpoint_path)
        if not path.is_file():
            return False
        state = torch.load(path, map_location="cpu", weights_only=False)
        meta = json.loads(state["meta"])
        if meta["config_hash"] != self.config_hash:
            diff = _dict_diff(meta.get("config", {}), self.hashed_config)
            raise ConfigError("refusing to resume from checkpoint with a different config: "
                              + "; ".join(diff))
        _, extra = load_checkpoint(path, self.bundle)
        self.opt_d.load_state_dict(extra["opt_d"])
        self.opt_p.load_state_dict(extra["opt_p"])
        self.report = list(extra["report"])
        self.next_cycle = int(extra["next_cycle"])
        self.initialized = bool(extra["initialized"])
        logger.info("resumed from %s at cycle %d", path, self.next_cycle)
        return True

    def write_report(self):
        if self.out_dir is None:
            return
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.report)
        atomic_write_bytes(self.out_dir / "report.jsonl", lines.encode())

    # -- running

    def initialize(self):
        if self.adversarial and not self.initialized:
            data = self.init_data if self.init_data is not None else self.loader.index
            if isinstance(data, DatasetIndex):
                data = SampleLoader(data, self.loader.cfg, seed=self.loader.seed)
            hist = []
            init_domain_classifier(self.bundle, data, DatasetIndex([]), self.cfg,
                                   optimizer=self.opt_d, history=hist)
            self.report.append({"cycle": -1, "epoch": 0, "stage": "INIT",
                                **_mean_breakdown(hist, self.cfg.lambda_grl),
                                "steps": len(hist), "lr": self.cfg.lr,
                                "checksums": checksums(self.bundle)})
        self.initialized = True

    def _batches(self, epoch: int, batch_list: list):
        for idx in batch_list:
            yield self.loader.collate(idx, epoch)

    def run_cycle(self, cycle: int):
        epoch, batch_list = self.schedule[cycle]
        cfg = self.cfg
        if self.adversarial:
            _, h1 = train_stage1(self.bundle, self._batches(epoch, batch_list), cfg, self.opt_d)
            self.report.append({"cycle": cycle, "epoch": epoch, "stage": "STAGE1",
                                **_mean_breakdown(h1, cfg.lambda_grl), "lr": cfg.lr,
                                "checksums": checksums(self.bundle)})
        _, h2 = train_stage2(self.bundle, self._batches(epoch, batch_list), cfg,
                             self.real_weight, self.opt_p, adversarial=self.adversarial)
        self.report.append({"cycle": cycle, "epoch": epoch, "stage": "STAGE2",
                            **_mean_breakdown(h2, cfg.lambda_grl), "lr": cfg.lr,
                            "checksums": checksums(self.bundle)})

    def run(self, resume: bool = False, stop_after_cycles: Optional[int] = None) -> dict:
        if resume and self.checkpoint_path is not None:
            self.resume()
        if not self.initialized:
            self.initialize()
        done = 0
        while self.next_cycle < len(self.schedule):
            if stop_after_cycles is not None and done >= stop_after_cycles:
                break
            self.run_cycle(self.next_cycle)
            self.next_cycle += 1
            done += 1
            if self.out_dir is not None:
                self.save(epoch=self.schedule[self.next_cycle - 1][0])
                self.write_report()
        finished = self.next_cycle >= len(self.schedule)
        if finished and self.out_dir is not None:
            self.save(self.out_dir / "final.pt", epoch=self.cfg.epochs)
        self.write_report()
        return {"finished": finished, "cycles": self.next_cycle, "report": self.report,
                "config_hash": self.config_hash, "real_weight": self.real_weight,
                "stages": [r["stage"] for r in self.report if r["stage"] != "INIT"]}


def run_fidip(bundle: PoseModelBundle, dataset, cfg: TrainConfig, out_dir=None, init_data=None,
              resume: bool = False, stop_after_cycles: Optional[int] = None,
              hash_payload: Optional[dict] = None) -> tuple:
    """Initialization session once, then Stage I / Stage II cycles; returns (bundle, report)."""
    trainer = FiDIPTrainer(bundle, dataset, cfg, out_dir, init_data, hash_payload)
    result = trainer.run(resume=resume, stop_after_cycles=stop_after_cycles)
    return trainer.bundle, result
