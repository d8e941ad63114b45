"""FiDIP network: encoder blocks, heatmap decoder, domain classifier and gradient reversal."""
from __future__ import annotations

import enum
import hashlib
import io
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError


class GradReverse(torch.autograd.Function):
    """Identity on the forward pass, multiplies the gradient by ``-lambda`` on the way back."""

    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_grl, None


def grad_reverse(x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    if lambda_grl < 0:
        raise ValueError("lambda_grl must be non-negative")
    return GradReverse.apply(x, float(lambda_grl))


class GradientReversal(nn.Module):
    def __init__(self, lambda_grl: float = 0.0005):
        super().__init__()
        self.lambda_grl = lambda_grl

    def forward(self, x):
        return grad_reverse(x, self.lambda_grl)

    def extra_repr(self):
        return f"lambda_grl={self.lambda_grl}"


class DomainClassifier(nn.Module):
    """Three fully connected layers on globally pooled features -> one synthetic-vs-real logit."""

    def __init__(self, in_channels: int, hidden: Sequence[int] = (256, 64)):
        super().__init__()
        h1, h2 = hidden
        self.fc1 = nn.Linear(in_channels, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, 1)

    def forward(self, pooled):
        x = F.relu(self.fc1(pooled))
        x = F.relu(self.fc2(x))
        return self.fc3(x).squeeze(-1)


# ---------------------------------------------------------------------------
# backbones


def _conv_block(cin, cout, stride, padding_mode, batch_norm):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=padding_mode,
                        bias=not batch_norm)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class DeconvHead(nn.Module):
    """SimpleBaseline decoder: three stride-2 deconvolutions then a 1x1 conv to K heatmaps."""

    def __init__(self, in_channels, num_joints, width=256, num_layers=3, batch_norm=True):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(num_layers):
            layers.append(nn.ConvTranspose2d(c, width, 4, stride=2, padding=1,
                                             bias=not batch_norm))
            if batch_norm:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU(inplace=True))
            c = width
        self.deconv = nn.Sequential(*layers)
        self.final = nn.Conv2d(width, num_joints, 1)
        self.upsample = 2 ** num_layers
        # SimpleBaseline initialisation
        for m in self.modules():
            if isinstance(m, (nn.ConvTranspose2d, nn.Conv2d)):
                nn.init.normal_(m.weight, std=0.001)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.final(self.deconv(x))


def reference_backbone(num_joints: int, widths=(16, 32, 64, 96, 128), head_width: int = 64,
                       padding_mode: str = "zeros", batch_norm: bool = True):
    """Small stride-32 encoder (five named blocks res1..res5) with a stride-4 deconv head."""
    blocks = OrderedDict()
    cin = 3
    for i, c in enumerate(widths):
        blocks[f"res{i + 1}"] = nn.Sequential(
            *_conv_block(cin, c, 2, padding_mode, batch_norm),
            *_conv_block(c, c, 1, padding_mode, batch_norm))
        cin = c
    for m in blocks.values():
        for layer in m.modules():
            if isinstance(layer, nn.Conv2d):
                nn.init.kaiming_normal_(layer.weight, mode="fan_out", nonlinearity="relu")
                if layer.bias is not None:
                    nn.init.zeros_(layer.bias)
    head = DeconvHead(cin, num_joints, width=head_width, batch_norm=batch_norm)
    return blocks, head, cin, 2 ** len(widths)


def simplebaseline50(num_joints: int):
    """ResNet-50 encoder + 3x256 deconv head, the SimpleBaseline-50 layout."""
    from torchvision.models import resnet50

    r = resnet50(weights=None)
    blocks = OrderedDict([
        ("res1", nn.Sequential(r.conv1, r.bn1, r.relu, r.maxpool)),
        ("res2", r.layer1), ("res3", r.layer2), ("res4", r.layer3), ("res5", r.layer4),
    ])
    return blocks, DeconvHead(2048, num_joints, width=256), 2048, 32


def mobilenetv2(num_joints: int):
    from torchvision.models import mobilenet_v2

    f = mobilenet_v2(weights=None).features
    cuts = [(0, 2), (2, 4), (4, 7), (7, 14), (14, 19)]
    blocks = OrderedDict((f"res{i + 1}", nn.Sequential(*f[a:b])) for i, (a, b) in enumerate(cuts))
    return blocks, DeconvHead(1280, num_joints, width=256), 1280, 32


BACKBONES = {
    "reference": reference_backbone,
    "simplebaseline50": simplebaseline50,
    "mobilenetv2": mobilenetv2,
}

# public checkpoint key prefix -> bundle key prefix
PRETRAINED_KEY_MAPS = {
    # SimpleBaseline (microsoft/human-pose-estimation.pytorch, pose_resnet_50)
    "simplebaseline50": [
        ("conv1.", "extractor.res1.0."), ("bn1.", "extractor.res1.1."),
        ("layer1.", "extractor.res2."), ("layer2.", "extractor.res3."),
        ("layer3.", "extractor.res4."), ("layer4.", "extractor.res5."),
        ("deconv_layers.", "pose_head.deconv."), ("final_layer.", "pose_head.final."),
    ],
    # torchvision mobilenet_v2 ImageNet weights (encoder only)
    "mobilenetv2": [(f"features.{j}.", f"extractor.res{i + 1}.{j - a}.")
                    for i, (a, b) in enumerate([(0, 2), (2, 4), (4, 7), (7, 14), (14, 19)])
                    for j in range(a, b)],
}


class Stage(str, enum.Enum):
    INIT = "INIT"
    STAGE1 = "STAGE1"
    STAGE2 = "STAGE2"


class PoseModelBundle(nn.Module):
    """Feature extractor (theta_f), pose predictor (theta_y) and domain classifier (theta_d)."""

    def __init__(self, num_joints: int = 17, input_size=(192, 256), backbone: str = "reference",
                 domain_hidden=(256, 64), **backbone_kwargs):
        super().__init__()
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; known: {sorted(BACKBONES)}")
        blocks, head, channels, stride = BACKBONES[backbone](num_joints, **backbone_kwargs)
        self.backbone_name = backbone
        self.input_size = tuple(input_size)  # (w, h)
        self.num_joints = num_joints
        self.feature_channels = channels
        self.encoder_stride = stride
        self.extractor = nn.ModuleDict(blocks)
        self.pose_head = head
        self.domain_head = DomainClassifier(channels, domain_hidden)
        self.frozen_blocks: tuple = ()
        self.stage: Optional[Stage] = None

    @property
    def block_names(self) -> list:
        return list(self.extractor.keys())

    @property
    def output_stride(self) -> int:
        return self.encoder_stride // self.pose_head.upsample

    # -- forward paths

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        w, h = self.input_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, h, w):
            raise ValueError(f"expected images of shape (N, 3, {h}, {w}), "
                             f"got {tuple(images.shape)}")
        x = images
        for block in self.extractor.values():
            x = block(x)
        return x

    def forward_pose(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 4 or features.shape[1] != self.feature_channels:
            raise ValueError(f"expected features with {self.feature_channels} channels, "
                             f"got {tuple(features.shape)}")
        return self.pose_head(features)

    def pooled(self, features: torch.Tensor) -> torch.Tensor:
        return features.mean(dim=(2, 3))

    def forward_domain(self, features: torch.Tensor, lambda_grl: float) -> torch.Tensor:
        """Domain logits; the gradient reaching the extractor is scaled by ``-lambda_grl``."""
        return self.domain_head(grad_reverse(self.pooled(features), lambda_grl))

    def forward(self, images):
        return self.forward_pose(self.forward_features(images))

    # -- parameter groups

    def param_groups(self) -> dict:
        return {"theta_f": self.extractor, "theta_y": self.pose_head, "theta_d": self.domain_head}

    def apply_freeze_mask(self, stage, frozen_blocks: Sequence[str] = ()) -> "PoseModelBundle":
        stage = Stage(stage)
        unknown = [b for b in frozen_blocks if b not in self.extractor]
        if unknown:
            raise ConfigError(f"unknown block names {unknown}; available: {self.block_names}")
        train_d = stage in (Stage.INIT, Stage.STAGE1)
        self.domain_head.requires_grad_(train_d)
        self.pose_head.requires_grad_(not train_d)
        for name, block in self.extractor.items():
            block.requires_grad_(not train_d and name not in frozen_blocks)
        self.stage = stage
        self.frozen_blocks = tuple(frozen_blocks)
        return self

    def freeze_mask(self) -> dict:
        """Block name -> trainable flag for every parameter block."""
        mask = {f"extractor.{n}": any(p.requires_grad for p in b.parameters())
                for n, b in self.extractor.items()}
        mask["pose_head"] = any(p.requires_grad for p in self.pose_head.parameters())
        mask["domain_head"] = any(p.requires_grad for p in self.domain_head.parameters())
        return mask

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True):
        super().train(mode)
        # keep normalisation statistics of locked blocks fixed
        if mode:
            for name, block in self.extractor.items():
                if not any(p.requires_grad for p in block.parameters()):
                    block.eval()
            for head in (self.pose_head, self.domain_head):
                if not any(p.requires_grad for p in head.parameters()):
                    head.eval()
        return self


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def checksums(bundle: PoseModelBundle) -> dict:
    out = {g: module_checksum(m) for g, m in bundle.param_groups().items()}
    for n, b in bundle.extractor.items():
        out[f"theta_f.{n}"] = module_checksum(b)
    return out


def build_bundle(model_cfg: dict, num_joints: int) -> PoseModelBundle:
    cfg = dict(model_cfg)
    seed = cfg.pop("init_seed", 0)
    torch.manual_seed(seed)
    return PoseModelBundle(num_joints=num_joints, **cfg)


# ---------------------------------------------------------------------------
# checkpoints


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(path, bundle: PoseModelBundle, meta: dict, extra: Optional[dict] = None):
    """Single archive: parameter tensors keyed by block, JSON metadata, optional trainer state."""
    state = {
        "theta_f": {n: b.state_dict() for n, b in bundle.extractor.items()},
        "theta_y": bundle.pose_head.state_dict(),
        "theta_d": bundle.domain_head.state_dict(),
        "meta": json.dumps(meta, sort_keys=True),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, bundle: PoseModelBundle) -> tuple:
    state = torch.load(path, map_location="cpu", weights_only=False)
    for n, sd in state["theta_f"].items():
        if n not in bundle.extractor:
            raise ConfigError(f"checkpoint block {n!r} not in model blocks {bundle.block_names}")
        bundle.extractor[n].load_state_dict(sd)
    bundle.pose_head.load_state_dict(state["theta_y"])
    bundle.domain_head.load_state_dict(state["theta_d"])
    return json.loads(state["meta"]), state.get("extra", {})


def load_pretrained(bundle: PoseModelBundle, path, strict: bool = False) -> list:
    """Load public backbone weights through the key map for ``bundle.backbone_name``.

    Returns the list of bundle keys that were not provided by the checkpoint.
    """
    if bundle.backbone_name not in PRETRAINED_KEY_MAPS:
        raise ConfigError(f"no pretrained key map for backbone {bundle.backbone_name!r}")
    src = torch.load(path, map_location="cpu", weights_only=False)
    if "state_dict" in src:
        src = src["state_dict"]
    mapped = {}
    for key, value in src.items():
        key = key.removeprefix("module.")
        for a, b in PRETRAINED_KEY_MAPS[bundle.backbone_name]:
            if key.startswith(a):
                mapped[b + key[len(a):]] = value
                break
    result = bundle.load_state_dict(mapped, strict=False)
    if strict and result.missing_keys:
        raise ConfigError(f"pretrained checkpoint lacks {len(result.missing_keys)} keys")
    return list(result.missing_keys)
