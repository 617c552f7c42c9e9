"""The trainable image-to-image stylization network.

A small U-Net: three downsample and three upsample stages with channel
widths (16, 32, 64), skip concatenation per stage, and a final sigmoid so
outputs stay in [0, 1] differentiably. Each stage is conv3x3 + instance
norm + ReLU; resampling is 2x average pooling down and nearest-neighbor up.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigurationError, ShapeError

CHECKPOINT_MAGIC = "objstyler-stylenet-v1"


@dataclass(frozen=True)
class StyleNetConfig:
    down_channels: tuple[int, ...] = (16, 32, 64)
    up_channels: tuple[int, ...] = (64, 32, 16)
    input_resolution: int = 512

    def __post_init__(self):
        if len(self.down_channels) != 3 or len(self.up_channels) != 3:
            raise ConfigurationError("exactly 3 downsample and 3 upsample stages")
        if any(c <= 0 for c in self.down_channels + self.up_channels):
            raise ConfigurationError("channel widths must be positive")


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class StyleNet(nn.Module):
    """U-Net mapping an (H, W, 3) image in [0, 1] to another one.

    H and W must be divisible by 8 (three 2x downsamples). The module also
    carries the optimizer step counter so checkpoints restore mid-training.
    """

    def __init__(self, config: StyleNetConfig = StyleNetConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.down_channels
        u1, u2, u3 = config.up_channels
        self.enc1 = _block(3, c1)
        self.enc2 = _block(c1, c2)
        self.enc3 = _block(c2, c3)
        self.bottleneck = _block(c3, c3)
        self.dec1 = _block(c3 + c3, u1)
        self.dec2 = _block(u1 + c2, u2)
        self.dec3 = _block(u2 + c1, u3)
        self.head = nn.Conv2d(u3, 3, kernel_size=3, padding=1)
        self.step = 0

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(img.shape)}")
        h, w = img.shape[0], img.shape[1]
        if h % 8 or w % 8:
            raise ShapeError(f"image dimensions must be divisible by 8, got {h}x{w}")
        x = img.permute(2, 0, 1).unsqueeze(0)
        s1 = self.enc1(x)
        s2 = self.enc2(F.avg_pool2d(s1, 2))
        s3 = self.enc3(F.avg_pool2d(s2, 2))
        b = self.bottleneck(F.avg_pool2d(s3, 2))
        d1 = self.dec1(torch.cat([F.interpolate(b, scale_factor=2, mode="nearest"), s3], dim=1))
        d2 = self.dec2(torch.cat([F.interpolate(d1, scale_factor=2, mode="nearest"), s2], dim=1))
        d3 = self.dec3(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), s1], dim=1))
        out = torch.sigmoid(self.head(d3))
        return out[0].permute(1, 2, 0)


def init_stylenet(config: StyleNetConfig = StyleNetConfig(), seed: int = 0) -> StyleNet:
    """Build a StyleNet with parameters deterministic in (config, seed)."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = StyleNet(config)
    return net


def parameter_count(net: StyleNet) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: StyleNet, path) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "config": asdict(net.config),
        "step": net.step,
        "parameters": net.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> StyleNet:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"'{path}' is not a {CHECKPOINT_MAGIC} checkpoint")
    cfg = payload["config"]
    config = StyleNetConfig(
        down_channels=tuple(cfg["down_channels"]),
        up_channels=tuple(cfg["up_channels"]),
        input_resolution=cfg["input_resolution"],
    )
    net = StyleNet(config)
    net.load_state_dict(payload["parameters"])
    net.step = int(payload["step"])
    return net
