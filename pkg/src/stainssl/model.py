"""Two-view encoder pair with a shared linear+softmax head.

The H and E concentration crops pass through two encoders of identical
architecture but fully separate parameters; the classifier head sees the
average of the two feature vectors.  The encoder is a small residual conv
net (GroupNorm, stride-2 stages, global average pooling) sized for CPU
training; parameters are He fan-in initialized from a seeded stream so a
model build is reproducible on any machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, NumericFaultError
from .rng import STREAM_INIT, substream


@dataclass
class EncoderSpec:
    input_channels: int = 1
    stage_widths: tuple = (16, 32, 64, 128)
    feature_dim: int = 128

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.input_channels != 1:
            raise InvalidInputError("encoders take single-channel concentration crops")
        if len(self.stage_widths) < 1 or any(w < 1 for w in self.stage_widths):
            raise InvalidInputError(f"bad stage widths {self.stage_widths}")
        if self.feature_dim < 1:
            raise InvalidInputError("feature_dim must be positive")


def _norm(width: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(width, 8), width)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm1 = _norm(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = _norm(width)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(x + out)


class Encoder(nn.Module):
    """Stem conv, then one stride-2 downsample + residual block per stage,
    global average pooling, and (if needed) a linear feature projection."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        w0 = spec.stage_widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(spec.input_channels, w0, 3, padding=1), _norm(w0), nn.ReLU()
        )
        stages = []
        prev = w0
        for w in spec.stage_widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=2, padding=1),
                    _norm(w),
                    nn.ReLU(),
                    ResidualBlock(w),
                )
            )
            prev = w
        self.stages = nn.Sequential(*stages)
        self.project = (
            nn.Linear(prev, spec.feature_dim) if spec.feature_dim != prev else None
        )

    def forward(self, x):
        out = self.stages(self.stem(x))
        out = out.mean(dim=(2, 3))
        if self.project is not None:
            out = self.project(out)
        return out


class DualEncoderClassifier(nn.Module):
    def __init__(self, spec: EncoderSpec, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise InvalidInputError("need at least two classes")
        self.spec = spec
        self.n_classes = n_classes
        self.encoder_h = Encoder(spec)
        self.encoder_e = Encoder(spec)
        self.head = nn.Linear(spec.feature_dim, n_classes)

    def forward(self, h_img: torch.Tensor, e_img: torch.Tensor):
        """Return (f_h, f_e, probs) for batches of (B, 1, S, S) crops."""
        if h_img.shape != e_img.shape or h_img.ndim != 4:
            raise InvalidInputError(
                f"expected matching (B, 1, S, S) crops, got {tuple(h_img.shape)} "
                f"and {tuple(e_img.shape)}"
            )
        f_h = self.encoder_h(h_img)
        f_e = self.encoder_e(e_img)
        _assert_finite("encoder_h features", f_h)
        _assert_finite("encoder_e features", f_e)
        logits = self.head((f_h + f_e) / 2.0)
        _assert_finite("classifier head logits", logits)
        return f_h, f_e, F.softmax(logits, dim=1)


def _assert_finite(where: str, t: torch.Tensor) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericFaultError(where)


def init_parameters(model: nn.Module, seed: int) -> None:
    """He fan-in initialization drawn from a counter-based stream.

    Parameters are visited in deterministic name order; norms get
    weight=1 / bias=0 and all other biases 0, so two builds with the same
    seed have bit-identical parameters regardless of torch's global RNG.
    """
    norm_weight_names = {
        f"{name}.weight" for name, m in model.named_modules() if isinstance(m, nn.GroupNorm)
    }
    index = 0
    for name, param in sorted(model.named_parameters()):
        with torch.no_grad():
            if name in norm_weight_names:
                param.fill_(1.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                fan_in = param.shape[1] * (
                    param.shape[2] * param.shape[3] if param.ndim == 4 else 1
                )
                std = math.sqrt(2.0 / fan_in)
                rng = substream(seed, STREAM_INIT, index)
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values).to(param.dtype))
        index += 1


def build_model(
    spec: EncoderSpec, n_classes: int, seed: int, dtype: torch.dtype = torch.float64
) -> DualEncoderClassifier:
    model = DualEncoderClassifier(spec, n_classes).to(dtype)
    init_parameters(model, seed)
    return model


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: DualEncoderClassifier,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler=None,
    extra: dict | None = None,
) -> None:
    """Write a versioned checkpoint; parameters are stored as float64."""
    state = {k: v.detach().to(torch.float64) for k, v in model.state_dict().items()}
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder_spec": {
            "input_channels": model.spec.input_channels,
            "stage_widths": list(model.spec.stage_widths),
            "feature_dim": model.spec.feature_dim,
        },
        "n_classes": model.n_classes,
        "dtype": str(next(model.parameters()).dtype),
        "model_state": state,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "scheduler_state": scheduler.state_dict() if scheduler is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild (model, optimizer, scheduler, extra) from a checkpoint.

    ``optimizer_factory(model) -> (optimizer, scheduler)`` restores
    optimizer state when given; pass None for inference-only loads.
    """
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {payload.get('version')!r}"
        )
    spec = EncoderSpec(**payload["encoder_spec"])
    dtype = {"torch.float64": torch.float64, "torch.float32": torch.float32}[
        payload["dtype"]
    ]
    model = DualEncoderClassifier(spec, payload["n_classes"]).to(dtype)
    model.load_state_dict(
        {k: v.to(dtype) for k, v in payload["model_state"].items()}
    )
    optimizer = scheduler = None
    if optimizer_factory is not None:
        optimizer, scheduler = optimizer_factory(model)
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        if payload["scheduler_state"] is not None and scheduler is not None:
            scheduler.load_state_dict(payload["scheduler_state"])
    return model, optimizer, scheduler, payload["extra"]
