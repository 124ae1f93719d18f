"""Image encoders producing r-dimensional representations, and the prefix/remainder split."""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError, FormatError, InputError

CHECKPOINT_FORMAT = "domainsplit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture id plus representation width ``r`` and prefix width ``k``.

    Default widths keep the 1:16 prefix ratio of a 24-of-384 split.
    """

    arch: str = "conv4"
    r: int = 128
    k: int = 8
    seed: int = 0
    in_channels: int = 3
    image_size: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        if not 0 < self.k < self.r:
            raise ConfigError(f"prefix width k={self.k} must satisfy 0 < k < r={self.r}")
        if self.arch not in ENCODERS:
            raise ConfigError(f"unknown encoder arch {self.arch!r}; known: {sorted(ENCODERS)}")
        if self.arch == "conv4" and len(self.widths) != 4:
            raise ConfigError("conv4 needs exactly four block widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class ConvEncoder(nn.Module):
    """Four conv-BN-ReLU blocks, two max-pools, global average pooling, linear to r."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        w1, w2, w3, w4 = spec.widths
        self.features = nn.Sequential(
            _block(spec.in_channels, w1),
            nn.MaxPool2d(2),
            _block(w1, w2),
            nn.MaxPool2d(2),
            _block(w2, w3),
            _block(w3, w4),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.fc = nn.Linear(w4, spec.r)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


class LinearEncoder(nn.Module):
    """Flatten + one linear map. Used for gradient checks and tiny fixtures."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.fc = nn.Linear(spec.in_channels * spec.image_size**2, spec.r)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.flatten(1))


ENCODERS = {"conv4": ConvEncoder, "linear": LinearEncoder}


def build_encoder(spec: EncoderSpec) -> nn.Module:
    """Instantiate the encoder with parameters seeded by ``spec.seed`` (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return ENCODERS[spec.arch](spec)


def encode(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Map a (B, C, H, W) batch to (B, r) representations."""
    spec: EncoderSpec = model.spec
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise InputError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {tuple(images.shape)}")
    return model(images)


@torch.no_grad()
def encode_dataset(model: nn.Module, images_nhwc, batch_size: int = 1024) -> torch.Tensor:
    """Eval-mode representations for a whole (N, H, W, C) array; restores the train flag."""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(images_nhwc).permute(0, 3, 1, 2)
    dtype = next(model.parameters()).dtype
    out = [encode(model, x[i : i + batch_size].to(dtype).contiguous()) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(out)


def split(h: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """First ``k`` features (domain prefix) and the rest (invariant remainder)."""
    if not 0 < k < h.shape[-1]:
        raise InputError(f"prefix width k={k} must satisfy 0 < k < {h.shape[-1]}")
    return h[..., :k], h[..., k:]


def slice_features(h, k: int, which: str):
    """Select ``full``, ``prefix`` or ``remainder`` columns of a representation array."""
    if which == "full":
        return h
    if which == "prefix":
        return h[..., :k]
    if which == "remainder":
        return h[..., k:]
    raise ConfigError(f"unknown slice {which!r}; expected full | prefix | remainder")


def param_checksum(*modules: nn.Module) -> str:
    """sha256 over the raw bytes of every parameter and buffer, in state_dict order."""
    digest = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            digest.update(name.encode())
            digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, spec: EncoderSpec, encoder: nn.Module, **extra) -> Path:
    """Write a versioned container: encoder spec, encoder tensors, plus any extra named entries."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_spec": spec.to_dict(),
        "encoder": encoder.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as e:
        raise FormatError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_encoder(path_or_payload) -> tuple[nn.Module, EncoderSpec]:
    payload = path_or_payload if isinstance(path_or_payload, dict) else load_checkpoint(path_or_payload)
    spec = EncoderSpec.from_dict(payload["encoder_spec"])
    model = build_encoder(spec)
    model.load_state_dict(payload["encoder"])
    model.eval()
    return model, spec
