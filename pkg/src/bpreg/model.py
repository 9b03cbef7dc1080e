"""Slice-to-score network and batch inference.

The network maps one 128x128 slice to a scalar score through a conv
backbone followed by a fixed head: 512 1x1 filters, ReLU, global average
pooling and a single fully connected output.  Two backbones exist: a
VGG16-style stack reproducing the reference architecture, and a reduced
"tiny" stack for CPU-scale training and tests.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ModelWeightsError
from .volumes import PreprocessedVolume

BACKBONES = ("vgg16", "tiny")

# VGG16 feature layout: conv widths with 'M' marking 2x2 max pooling.
_VGG16_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


@dataclass
class ModelConfig:
    backbone: str = "tiny"
    pretrained: bool = False
    input_channels: int = 1

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.input_channels != 1:
            raise ConfigError("the model takes single-channel slices (input_channels must be 1)")
        if self.pretrained and self.backbone != "vgg16":
            raise ConfigError("pretrained weights exist only for the vgg16 backbone")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _vgg16_features(in_channels):
    layers = []
    c = in_channels
    for item in _VGG16_LAYOUT:
        if item == "M":
            layers.append(nn.MaxPool2d(2))
        else:
            layers.extend([nn.Conv2d(c, item, 3, padding=1), nn.ReLU(inplace=True)])
            c = item
    return nn.Sequential(*layers), 512


def _tiny_features(in_channels):
    layers = [
        nn.Conv2d(in_channels, 8, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    ]
    return nn.Sequential(*layers), 32


class SliceScoreModel(nn.Module):
    """f(slice) = score; forward takes (B, 1, 128, 128) and returns (B,)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self._replicate_input = False

        if config.backbone == "vgg16":
            if config.pretrained:
                self.features = _load_pretrained_vgg16_features()
                self._replicate_input = True  # grayscale -> 3 channels
                feat_channels = 512
            else:
                self.features, feat_channels = _vgg16_features(config.input_channels)
        else:
            self.features, feat_channels = _tiny_features(config.input_channels)

        self.head_conv = nn.Conv2d(feat_channels, 512, kernel_size=1, stride=1)
        self.fc = nn.Linear(512, 1)

    def forward(self, x):
        if self._replicate_input:
            x = x.repeat(1, 3, 1, 1)
        x = self.features(x)
        x = torch.relu(self.head_conv(x))
        x = x.mean(dim=(2, 3))  # global average pooling
        return self.fc(x).squeeze(-1)


def _load_pretrained_vgg16_features():
    try:
        from torchvision.models import VGG16_Weights, vgg16
    except ImportError as exc:
        raise ModelWeightsError(
            "pretrained vgg16 requested but torchvision is not installed"
        ) from exc
    try:
        return vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    except Exception as exc:
        raise ModelWeightsError(f"pretrained vgg16 weights could not be loaded: {exc}") from exc


def build_model(config: ModelConfig, seed: int) -> SliceScoreModel:
    """Construct a model with seed-deterministic initialization."""
    config.validate()
    torch.manual_seed(seed)
    model = SliceScoreModel(config)
    model.eval()
    return model


def predict_scores(model: SliceScoreModel, volume, batch_size: int = 64):
    """Score every slice of a volume; no augmentation, deterministic.

    Accepts a PreprocessedVolume or a plain (n, H, W) array and returns a
    list of n floats.
    """
    slices = volume.slices if isinstance(volume, PreprocessedVolume) else np.asarray(volume)
    if len(slices) == 0:
        return []
    return predict_slice_scores(model, slices, batch_size)


def predict_slice_scores(model: SliceScoreModel, slices, batch_size: int = 64):
    """Score a stack of slices given as an (n, H, W) array."""
    slices = np.asarray(slices, dtype=np.float32)
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            chunk = torch.from_numpy(slices[start : start + batch_size]).unsqueeze(1)
            out = model(chunk.to(param.dtype))
            scores.extend(float(v) for v in out.reshape(-1))
    if was_training:
        model.train()
    return scores


def empty_slice_score(model: SliceScoreModel, size: int = 128) -> float:
    """Score of an all-background slice (every pixel at the HU floor)."""
    empty = np.full((1, size, size), -1.0, dtype=np.float32)
    return predict_slice_scores(model, empty)[0]


CHECKPOINT_VERSION = 1


def save_checkpoint(model: SliceScoreModel, path, extra=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a checkpoint; the stored config hash must match its config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(payload["config"])
    if config_hash(config) != payload.get("config_hash"):
        raise ConfigError(f"{path}: checkpoint config hash mismatch")
    model = SliceScoreModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
