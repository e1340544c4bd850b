"""Segmentation network (U-Net with a configurable feature tap) and the
domain discriminator that classifies tapped features by acquisition site.

Both networks run in double precision so analytic gradients can be checked
against finite differences tightly and so training is bit-reproducible on
CPU. Inputs are (N, 1, H, W) tensors; arbitrary H, W are reflect-padded up
to the next multiple of 2^depth and the output is cropped back.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import Image2D, ProbMask


class NetError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureTap:
    """Which segmenter activation maps form the representation h. Tapped maps
    are average-pooled to the coarsest grid among them and concatenated on
    channels. Valid names: enc1..encD, bottleneck, dec1..decD."""

    names: tuple = ("bottleneck",)

    def __post_init__(self):
        if len(self.names) == 0:
            raise NetError("feature tap set must be nonempty")
        object.__setattr__(self, "names", tuple(self.names))

    def build(self, taps: dict) -> torch.Tensor:
        missing = [n for n in self.names if n not in taps]
        if missing:
            raise NetError(f"unknown tap names {missing}; have {sorted(taps)}")
        maps = [taps[n] for n in self.names]
        target = min((m.shape[-2], m.shape[-1]) for m in maps)
        pooled = [m if m.shape[-2:] == target else F.adaptive_avg_pool2d(m, target)
                  for m in maps]
        return torch.cat(pooled, dim=1)


@dataclass(frozen=True)
class SegmenterConfig:
    depth: int = 3
    base_filters: int = 8
    max_filters: int = 64
    dropout: float = 0.0
    in_channels: int = 1
    feature_tap: FeatureTap = FeatureTap()

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1 or self.max_filters < self.base_filters:
            raise NetError("invalid segmenter size parameters")
        if not 0.0 <= self.dropout < 1.0:
            raise NetError("dropout must be in [0, 1)")

    def channel_plan(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters)
                for i in range(self.depth + 1)]

    def tap_channels(self) -> int:
        """Channel count of h for this config."""
        chans = self.channel_plan()
        total = 0
        for name in self.feature_tap.names:
            if name == "bottleneck":
                total += chans[-1]
            elif name.startswith("enc"):
                total += chans[int(name[3:]) - 1]
            elif name.startswith("dec"):
                total += chans[int(name[3:]) - 1]
            else:
                raise NetError(f"unknown tap name {name!r}")
        return total

    @classmethod
    def paper_profile(cls, **kw) -> "SegmenterConfig":
        return cls(depth=4, base_filters=16, max_filters=256, **kw)

    @classmethod
    def desk_profile(cls, **kw) -> "SegmenterConfig":
        return cls(depth=3, base_filters=8, max_filters=64, **kw)

    @classmethod
    def tiny_profile(cls, **kw) -> "SegmenterConfig":
        """Small enough for finite-difference gradient checks."""
        return cls(depth=2, base_filters=4, max_filters=16, **kw)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int
    n_domains: int = 2
    conv_channels: tuple = (4, 8, 16, 32)
    hidden: tuple = (64, 32)
    dropout: float = 0.5

    def __post_init__(self):
        if self.in_channels < 1 or self.n_domains < 2:
            raise NetError("discriminator needs >=1 input channel and >=2 domains")


def config_hash(cfg) -> str:
    """Stable short hash of a (possibly nested) dataclass or dict."""
    payload = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    blob = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNet(nn.Module):
    """Encoder/decoder with skip connections, logistic output, and a feature
    tap exposing intermediate activation maps."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channel_plan()
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for c in chans[:-1]:
            self.enc.append(_ConvBlock(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(chans[-2], chans[-1])
        self.bottleneck_dropout = nn.Dropout2d(cfg.dropout)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.dec.append(_ConvBlock(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(chans[0], 1, 1)
        # start from a sparse-foreground prior so Dice training does not
        # spend its first steps suppressing background everywhere
        nn.init.constant_(self.head.bias, -1.0)
        self.double()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, 1, H, W) -> (probabilities (N, 1, H, W), h)."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise NetError(f"expected (N, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h0, w0 = x.shape[-2:]
        x, pad = _pad_to_multiple(x, 2 ** self.cfg.depth)
        taps: dict[str, torch.Tensor] = {}
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            taps[f"enc{i + 1}"] = x
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck_dropout(self.bottleneck(x))
        taps["bottleneck"] = x
        for j, (up, dec) in enumerate(zip(self.up, self.dec)):
            skip = skips[-(j + 1)]
            x = dec(torch.cat([up(x), skip], dim=1))
            taps[f"dec{self.cfg.depth - j}"] = x
        probs = torch.sigmoid(self.head(x))
        probs = probs[..., : h0, : w0] if pad else probs
        return probs, self.cfg.feature_tap.build(taps)


class DomainDiscriminator(nn.Module):
    """Strided conv stack over h, global average pooling, and a small fully
    connected head emitting one logit per domain."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        cin = cfg.in_channels
        for c in cfg.conv_channels:
            convs += [nn.Conv2d(cin, c, 3, stride=2, padding=1),
                      nn.BatchNorm2d(c), nn.LeakyReLU(0.01, inplace=True)]
            cin = c
        self.convs = nn.Sequential(*convs)
        self.pool = nn.AdaptiveAvgPool2d(1)
        head = []
        hin = cfg.conv_channels[-1]
        for hdim in cfg.hidden:
            head += [nn.Linear(hin, hdim), nn.LeakyReLU(0.01, inplace=True),
                     nn.Dropout(cfg.dropout)]
            hin = hdim
        head.append(nn.Linear(hin, cfg.n_domains))
        self.head = nn.Sequential(*head)
        self.double()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.ndim != 4 or h.shape[1] != self.cfg.in_channels:
            raise NetError(
                f"expected h of shape (N, {self.cfg.in_channels}, h, w), got {tuple(h.shape)}")
        z = self.pool(self.convs(h)).flatten(1)
        return self.head(z)


def _pad_to_multiple(x: torch.Tensor, mult: int) -> tuple[torch.Tensor, bool]:
    h, w = x.shape[-2:]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph == 0 and pw == 0:
        return x, False
    return F.pad(x, (0, pw, 0, ph), mode="reflect"), True


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------

def segment(f: UNet, image: Image2D) -> tuple[ProbMask, torch.Tensor]:
    """Inference on a single image; respects the module's train/eval mode but
    never builds a graph."""
    x = torch.from_numpy(image.pixels.copy()).reshape(1, 1, *image.shape)
    with torch.no_grad():
        probs, h = f(x)
    return ProbMask(probs[0, 0].numpy()), h


def discriminate(d: DomainDiscriminator, h: torch.Tensor) -> torch.Tensor:
    return d(h)


def freeze(net: nn.Module, parameter_set=None) -> None:
    """Exclude parameters from optimization. None means all; an explicit
    empty set is a no-op."""
    _set_requires_grad(net, parameter_set, False)


def unfreeze(net: nn.Module, parameter_set=None) -> None:
    _set_requires_grad(net, parameter_set, True)


def _set_requires_grad(net: nn.Module, parameter_set, value: bool) -> None:
    params = dict(net.named_parameters())
    names = list(params) if parameter_set is None else list(parameter_set)
    unknown = [n for n in names if n not in params]
    if unknown:
        raise NetError(f"unknown parameter names {unknown[:5]}")
    for n in names:
        params[n].requires_grad_(value)


# ---------------------------------------------------------------------------
# snapshots and checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSnapshot:
    """Copies of all nn.Parameters of one network, keyed by name."""

    params: dict

    @classmethod
    def of(cls, net: nn.Module) -> "ParameterSnapshot":
        return cls({n: p.detach().numpy().copy() for n, p in net.named_parameters()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSnapshot):
            return NotImplemented
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params)

    def max_abs_diff(self, other: "ParameterSnapshot") -> float:
        keys = self.params.keys() & other.params.keys()
        return max(float(np.abs(self.params[k] - other.params[k]).max()) for k in keys)


def save_checkpoint(path, net: nn.Module, cfg_hash: str, stage: str,
                    extra: dict | None = None) -> None:
    """npz container: param/<name> and buffer/<name> arrays plus a JSON meta
    blob carrying the config hash and stage tag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": p.detach().numpy() for n, p in net.named_parameters()}
    arrays.update({f"buffer/{n}": b.detach().numpy() for n, b in net.named_buffers()})
    meta = {"config_hash": cfg_hash, "stage": stage}
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, net: nn.Module, expected_hash: str | None = None) -> dict:
    """Restore parameters and buffers in place; returns the meta dict.
    Raises CheckpointError when the stored config hash does not match."""
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if expected_hash is not None and meta["config_hash"] != expected_hash:
            raise CheckpointError(
                f"checkpoint config hash {meta['config_hash']} != expected {expected_hash}")
        params = dict(net.named_parameters())
        buffers = dict(net.named_buffers())
        with torch.no_grad():
            for key in data.files:
                if key == "__meta__":
                    continue
                kind, name = key.split("/", 1)
                table = params if kind == "param" else buffers
                if name not in table:
                    raise CheckpointError(f"checkpoint entry {key} not present in network")
                table[name].copy_(torch.from_numpy(data[key].copy()))
    return meta
