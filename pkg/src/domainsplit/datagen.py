"""Synthetic multi-domain data: tinted shape images, Gaussian domain clouds, two-view augmentation.

Everything here is a pure function of its inputs and seed. Per-sample augmentation
parameters are drawn from ``np.random.default_rng([seed, epoch, sample_id])`` so a
sample's views do not depend on which batch it lands in.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError

BASE_RECIPE_ID = "shapes-v1"
COLORED_RECIPE_ID = "colored-shapes-v1"
NUM_SHAPE_CLASSES = 10

# channel multipliers applied to a grayscale image
TINTS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.25, 0.25),
    "green": (0.25, 1.0, 0.25),
    "blue": (0.25, 0.25, 1.0),
    "yellow": (1.0, 1.0, 0.25),
    "gray": (1.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class Tint:
    name: str
    rgb: tuple[float, float, float]

    @classmethod
    def named(cls, name: str) -> "Tint":
        try:
            return cls(name, TINTS[name])
        except KeyError:
            raise ConfigError(f"unknown tint {name!r}; known: {sorted(TINTS)}") from None


def as_palette(palette: Sequence[Tint | str]) -> list[Tint]:
    return [p if isinstance(p, Tint) else Tint.named(p) for p in palette]


@dataclass
class MultiDomainDataset:
    """Images (N, H, W, C) in [0, 1] with class labels and optional domain labels."""

    images: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray | None
    num_domains: int
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.class_labels) != len(self.images):
            raise FormatError("class_labels length does not match images")
        if self.domain_labels is not None and len(self.domain_labels) != len(self.images):
            raise FormatError("domain_labels length does not match images")

    @property
    def domain_names(self) -> list[str]:
        return list(self.provenance.get("palette", []))

    def subset(self, idx: np.ndarray) -> "MultiDomainDataset":
        return MultiDomainDataset(
            images=self.images[idx],
            class_labels=self.class_labels[idx],
            domain_labels=None if self.domain_labels is None else self.domain_labels[idx],
            num_domains=self.num_domains,
            num_classes=self.num_classes,
            provenance=dict(self.provenance, subset=True),
        )

    def recipe_hash(self) -> str:
        return recipe_hash(self.provenance)


def recipe_hash(provenance: dict) -> str:
    blob = json.dumps(provenance, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def make_base_images(n: int, seed: int, size: int = 16, n_classes: int = NUM_SHAPE_CLASSES):
    """Render ``n`` grayscale procedural shape images with class labels.

    Ten classes: disk, ring, filled square, square outline, horizontal stripes,
    vertical stripes, checkerboard, plus, cross, triangle. Position, scale,
    rotation, stripe frequency, contrast and pixel noise vary per image.

    Returns ``(images, labels)`` with images of shape (n, size, size), float32.
    """
    if n <= 0:
        raise ConfigError("n must be positive")
    if not 1 <= n_classes <= NUM_SHAPE_CLASSES:
        raise ConfigError(f"n_classes must be in [1, {NUM_SHAPE_CLASSES}]")
    rng = np.random.default_rng([seed, 0xBA5E])
    labels = rng.integers(0, n_classes, size=n)
    cx = rng.uniform(-0.25, 0.25, (n, 1, 1))
    cy = rng.uniform(-0.25, 0.25, (n, 1, 1))
    s = rng.uniform(0.55, 0.9, (n, 1, 1))
    theta = rng.uniform(-0.25, 0.25, (n, 1, 1))
    freq = rng.uniform(2.5, 4.0, (n, 1, 1))
    phase = rng.uniform(0, 2 * np.pi, (n, 1, 1))
    fg = rng.uniform(0.6, 1.0, (n, 1, 1))
    bg = rng.uniform(0.0, 0.35, (n, 1, 1))
    noise = rng.normal(0.0, 0.05, (n, size, size))

    g = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(g, g, indexing="ij")
    x = xx[None] - cx
    y = yy[None] - cy
    u = np.cos(theta) * x + np.sin(theta) * y
    v = -np.sin(theta) * x + np.cos(theta) * y
    r = np.sqrt(u**2 + v**2)
    box = np.maximum(np.abs(u), np.abs(v))
    du, dv = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)

    masks = [
        r < 0.8 * s,
        np.abs(r - 0.6 * s) < 0.15 * s,
        box < 0.65 * s,
        np.abs(box - 0.6 * s) < 0.13 * s,
        np.cos(np.pi * freq * v + phase) > 0,
        np.cos(np.pi * freq * u + phase) > 0,
        np.cos(np.pi * freq * u + phase) * np.cos(np.pi * freq * v) > 0,
        ((np.abs(u) < 0.18 * s) & (np.abs(v) < 0.8 * s)) | ((np.abs(v) < 0.18 * s) & (np.abs(u) < 0.8 * s)),
        ((np.abs(du) < 0.18 * s) & (np.abs(dv) < 0.8 * s)) | ((np.abs(dv) < 0.18 * s) & (np.abs(du) < 0.8 * s)),
        (v > -0.5 * s) & (v < 0.7 * s) & (np.abs(u) < (0.7 * s - v) * 0.55),
    ]
    mask = np.zeros((n, size, size), dtype=bool)
    for c in range(n_classes):
        sel = labels == c
        mask[sel] = masks[c][sel]
    img = bg + (fg - bg) * mask + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def _to_gray(base_images: np.ndarray) -> np.ndarray:
    arr = np.asarray(base_images)
    if not np.issubdtype(arr.dtype, np.number):
        raise FormatError("base images must be numeric arrays")
    if arr.ndim == 3:
        return arr.astype(np.float32)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        return arr[..., 0].astype(np.float32)
    if arr.ndim == 4 and arr.shape[-1] == 3:
        return (arr @ np.array([0.299, 0.587, 0.114])).astype(np.float32)
    raise FormatError(f"expected (N,H,W), (N,H,W,1) or (N,H,W,3) images, got {arr.shape}")


def generate_colored(
    base_images: np.ndarray,
    class_labels: np.ndarray,
    palette: Sequence[Tint | str],
    seed: int,
    num_classes: int | None = None,
    base_provenance: dict | None = None,
) -> MultiDomainDataset:
    """Tint each image with one palette entry drawn uniformly at random.

    The domain label of a sample is the index of its tint in ``palette``.
    """
    tints = as_palette(palette)
    if not tints:
        raise ConfigError("palette must contain at least one tint")
    gray = _to_gray(base_images)
    if len(gray) != len(class_labels):
        raise FormatError("base_images and class_labels differ in length")
    rng = np.random.default_rng([seed, 0xC010])
    domains = rng.integers(0, len(tints), size=len(gray))
    rgb = np.array([t.rgb for t in tints], dtype=np.float32)
    images = np.clip(gray[..., None] * rgb[domains][:, None, None, :], 0.0, 1.0).astype(np.float32)
    labels = np.asarray(class_labels, dtype=np.int64)
    return MultiDomainDataset(
        images=images,
        class_labels=labels.copy(),
        domain_labels=domains.astype(np.int64),
        num_domains=len(tints),
        num_classes=int(num_classes if num_classes is not None else labels.max() + 1),
        provenance={
            "recipe_id": COLORED_RECIPE_ID,
            "seed": int(seed),
            "palette": [t.name for t in tints],
            "tints": [list(t.rgb) for t in tints],
            "base": base_provenance or {},
        },
    )


def make_colored_shapes(
    n: int,
    palette: Sequence[Tint | str],
    seed: int,
    size: int = 16,
    n_classes: int = NUM_SHAPE_CLASSES,
) -> MultiDomainDataset:
    """Shapes base set + random tinting, both driven by ``seed``."""
    base, labels = make_base_images(n, seed, size=size, n_classes=n_classes)
    prov = {"recipe_id": BASE_RECIPE_ID, "n": n, "seed": int(seed), "size": size, "n_classes": n_classes}
    return generate_colored(base, labels, palette, seed, num_classes=n_classes, base_provenance=prov)


def synth_gaussian_domains(M: int, n_per_domain: int, dim: int, separation: float, seed: int):
    """Draw ``n_per_domain`` unit-variance points around each of ``M`` means.

    Means sit on a regular simplex so every pair is exactly ``separation`` apart.
    Returns ``(X, y)`` with X of shape (M * n_per_domain, dim).
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    if n_per_domain <= 0:
        raise ConfigError("n_per_domain must be positive")
    if separation < 0:
        raise ConfigError("separation must be >= 0")
    if M > 1 and dim < M - 1:
        raise ConfigError(f"dim must be >= M - 1 to place {M} equidistant means")
    means = np.zeros((M, dim))
    if M > 1:
        centered = np.eye(M) - 1.0 / M
        _, _, vt = np.linalg.svd(centered)
        coords = centered @ vt[: M - 1].T  # pairwise distances sqrt(2)
        means[:, : M - 1] = coords * separation / np.sqrt(2)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(M), n_per_domain)
    X = means[y] + rng.standard_normal((len(y), dim))
    return X, y.astype(np.int64)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentRecipe:
    """Two-view augmentation settings (SimCLR-style, small images).

    ``preserve_tint`` skips saturation jitter, the only op here that changes
    channel ratios and so the tint.
    """

    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    preserve_tint: bool = True
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    @classmethod
    def identity(cls) -> "AugmentRecipe":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0)

    @property
    def is_identity(self) -> bool:
        return (
            self.crop_scale == (1.0, 1.0)
            and self.crop_ratio == (1.0, 1.0)
            and self.flip_p == 0.0
            and self.brightness == 0.0
            and self.contrast == 0.0
            and (self.saturation == 0.0 or self.preserve_tint)
            and self.blur_p == 0.0
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewPair:
    view_a: torch.Tensor
    view_b: torch.Tensor
    sample_id: int
    domain_label: int | None = None


_N_PARAMS = 10


def _view_params(recipe: AugmentRecipe, rng: np.random.Generator) -> np.ndarray:
    # always draw the same count so streams stay aligned whatever the recipe
    draws = rng.random(_N_PARAMS)
    lo, hi = recipe.crop_scale
    area = lo + (hi - lo) * draws[0]
    lr0, lr1 = np.log(recipe.crop_ratio[0]), np.log(recipe.crop_ratio[1])
    ratio = np.exp(lr0 + (lr1 - lr0) * draws[1])
    w = min(1.0, np.sqrt(area * ratio))
    h = min(1.0, np.sqrt(area / ratio))
    cx = (1 - w) * (2 * draws[2] - 1)
    cy = (1 - h) * (2 * draws[3] - 1)
    flip = -1.0 if draws[4] < recipe.flip_p else 1.0
    bright = 1 + recipe.brightness * (2 * draws[5] - 1)
    contr = 1 + recipe.contrast * (2 * draws[6] - 1)
    sat = 1.0 if recipe.preserve_tint else 1 + recipe.saturation * (2 * draws[7] - 1)
    blur = draws[8] < recipe.blur_p
    s0, s1 = recipe.blur_sigma
    sigma = s0 + (s1 - s0) * draws[9] if blur else 0.0
    return np.array([w * flip, h, cx, cy, bright, contr, sat, sigma])


def _apply(images: torch.Tensor, params: np.ndarray) -> torch.Tensor:
    """images (B, C, H, W); params (B, 8) from ``_view_params``."""
    B, C, H, W = images.shape
    p = torch.as_tensor(params, dtype=images.dtype)
    theta = torch.zeros(B, 2, 3, dtype=images.dtype)
    theta[:, 0, 0] = p[:, 0]
    theta[:, 1, 1] = p[:, 1]
    theta[:, 0, 2] = p[:, 2]
    theta[:, 1, 2] = p[:, 3]
    grid = F.affine_grid(theta, [B, C, H, W], align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="reflection", align_corners=False)

    out = out * p[:, 4].view(B, 1, 1, 1)
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * p[:, 5].view(B, 1, 1, 1) + mean
    gray = out.mean(dim=1, keepdim=True)
    out = (out - gray) * p[:, 6].view(B, 1, 1, 1) + gray

    sigma = p[:, 7]
    if bool((sigma > 0).any()):
        k = torch.arange(-1, 2, dtype=images.dtype)
        safe = torch.where(sigma > 0, sigma, torch.ones_like(sigma))
        g1 = torch.exp(-(k[None] ** 2) / (2 * safe[:, None] ** 2))
        g1 = torch.where((sigma > 0)[:, None], g1, torch.tensor([0.0, 1.0, 0.0], dtype=images.dtype))
        g1 = g1 / g1.sum(dim=1, keepdim=True)
        kern = (g1[:, :, None] * g1[:, None, :]).repeat_interleave(C, dim=0).unsqueeze(1)
        padded = F.pad(out.reshape(1, B * C, H, W), (1, 1, 1, 1), mode="reflect")
        out = F.conv2d(padded, kern, groups=B * C).reshape(B, C, H, W)
    return out.clamp(0.0, 1.0)


def augment_views(
    images: np.ndarray | torch.Tensor,
    sample_ids: Sequence[int],
    recipe: AugmentRecipe,
    seed: int,
    epoch: int = 0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently augmented views of a batch of (B, H, W, C) images.

    Returns two float32 tensors of shape (B, C, H, W).
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
    if recipe.is_identity:
        return x.clone(), x.clone()
    pa, pb = [], []
    for sid in sample_ids:
        rng = np.random.default_rng([int(seed), int(epoch), int(sid)])
        pa.append(_view_params(recipe, rng))
        pb.append(_view_params(recipe, rng))
    return _apply(x, np.stack(pa)), _apply(x, np.stack(pb))


def two_view_augment(
    image: np.ndarray,
    recipe: AugmentRecipe,
    seed: int,
    sample_id: int = 0,
    epoch: int = 0,
    domain_label: int | None = None,
) -> ViewPair:
    """Augment a single (H, W, C) image into a ViewPair; same result as inside a batch."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise FormatError(f"expected an (H, W, C) image, got shape {image.shape}")
    a, b = augment_views(image[None], [sample_id], recipe, seed, epoch)
    return ViewPair(a[0], b[0], int(sample_id), domain_label)


# ---------------------------------------------------------------------------
# on-disk cache
#
# layout (little endian):
#   magic   4s   b"MDDS"
#   version u16
#   hash    32s  sha256 of the recipe/provenance json
#   seed    i64
#   M       u32  C_cls u32  N u32  H u32  W u32  C u32
#   has_dom u8
#   prov_len u32, provenance json (utf-8)
#   images  float32[N*H*W*C]
#   class   int64[N]
#   domain  int64[N]            (only when has_dom)

CACHE_MAGIC = b"MDDS"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sH32sqIIIIIIB")


def save_dataset(ds: MultiDomainDataset, path: str | Path) -> Path:
    path = Path(path)
    prov = json.dumps(ds.provenance, sort_keys=True).encode()
    N, H, W, C = ds.images.shape
    header = _HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        bytes.fromhex(ds.recipe_hash()),
        int(ds.provenance.get("seed", 0)),
        ds.num_domains,
        ds.num_classes,
        N,
        H,
        W,
        C,
        int(ds.domain_labels is not None),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.class_labels, dtype="<i8").tobytes())
        if ds.domain_labels is not None:
            fh.write(np.ascontiguousarray(ds.domain_labels, dtype="<i8").tobytes())
    return path


def load_dataset(path: str | Path) -> MultiDomainDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise FormatError(f"{path}: file too short for a dataset header")
    magic, version, digest, seed, M, n_cls, N, H, W, C, has_dom = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off = _HEADER.size
    (plen,) = struct.unpack_from("<I", data, off)
    off += 4
    provenance = json.loads(data[off : off + plen].decode())
    off += plen
    n_img = N * H * W * C
    expected = off + 4 * n_img + 8 * N * (1 + has_dom)
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} does not match header ({expected})")
    images = np.frombuffer(data, dtype="<f4", count=n_img, offset=off).reshape(N, H, W, C).astype(np.float32)
    off += 4 * n_img
    cls = np.frombuffer(data, dtype="<i8", count=N, offset=off).astype(np.int64)
    off += 8 * N
    dom = np.frombuffer(data, dtype="<i8", count=N, offset=off).astype(np.int64) if has_dom else None
    ds = MultiDomainDataset(images, cls, dom, M, n_cls, provenance)
    if ds.recipe_hash() != digest.hex():
        raise FormatError(f"{path}: recipe hash mismatch")
    return ds


def cached_colored_shapes(cache_dir: str | Path | None, n: int, palette, seed: int, **kw) -> MultiDomainDataset:
    """``make_colored_shapes`` with an on-disk cache keyed by (recipe, seed)."""
    if cache_dir is None:
        return make_colored_shapes(n, palette, seed, **kw)
    key = {"recipe_id": COLORED_RECIPE_ID, "n": n, "palette": [t.name for t in as_palette(palette)], "seed": seed, **kw}
    path = Path(cache_dir) / f"{recipe_hash(key)[:16]}.mdds"
    if path.exists():
        return load_dataset(path)
    ds = make_colored_shapes(n, palette, seed, **kw)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    return ds
