"""Procedural labeled toy images: one filled shape on a dark canvas.

Labels stand in for prompts. Condition index = 2 * shape + fill, with index 8
reserved for the null condition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

SHAPES = ("square", "circle", "triangle", "cross")
FILLS = ("dim", "bright")
FILL_VALUE = {"dim": 0.3, "bright": 0.9}
BACKGROUND = -1.0
NOISE_STD = 0.02

MAGIC = b"TOYD"
VERSION = 1
_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class AttributeLabel:
    shape: str
    fill: str

    def __post_init__(self):
        if self.shape not in SHAPES or self.fill not in FILLS:
            raise ValueError(f"invalid label ({self.shape!r}, {self.fill!r})")

    @property
    def index(self) -> int:
        return 2 * SHAPES.index(self.shape) + FILLS.index(self.fill)

    @classmethod
    def from_index(cls, i: int) -> "AttributeLabel":
        if not 0 <= i < 8:
            raise ValueError(f"label index {i} out of range [0, 7]")
        return cls(SHAPES[i // 2], FILLS[i % 2])

    @classmethod
    def parse(cls, text: str) -> "AttributeLabel":
        shape, fill = (s.strip() for s in text.split(","))
        return cls(shape, fill)

    def __str__(self) -> str:
        return f"{self.shape},{self.fill}"


def all_labels() -> list[AttributeLabel]:
    return [AttributeLabel.from_index(i) for i in range(8)]


@dataclass
class ToyImage:
    pixels: np.ndarray  # (H, W) float32 in [-1, 1]
    label: AttributeLabel
    seed: int

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels.copy())[None]


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (state is advanced by the golden gamma first)."""
    z = (x + _GOLDEN) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def derive_seed(master: int, i: int) -> int:
    """Per-sample seed: splitmix64 of the master seed advanced ``i`` gammas."""
    return splitmix64((master + i * _GOLDEN) & _M64)


def shape_mask(shape: str, cx: float, cy: float, s: float, size: int) -> np.ndarray:
    c = np.arange(size) + 0.5
    x, y = np.meshgrid(c, c)
    dx, dy = x - cx, y - cy
    if shape == "square":
        return (np.abs(dx) <= 0.85 * s) & (np.abs(dy) <= 0.85 * s)
    if shape == "circle":
        return dx**2 + dy**2 <= s**2
    if shape == "triangle":
        # apex up; half-width grows linearly down to s at the base
        frac = (dy + s) / (2 * s)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= s * frac)
    if shape == "cross":
        arm = 0.38 * s
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    raise ValueError(shape)


def _geometry(rng: np.random.Generator, size: int) -> tuple[float, float, float]:
    s = rng.uniform(0.22, 0.36) * size
    margin = s + 1.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return cx, cy, s


def render_sample(label: AttributeLabel, rng_seed: int, size: int = 16) -> ToyImage:
    rng = np.random.default_rng(rng_seed)
    cx, cy, s = _geometry(rng, size)
    mask = shape_mask(label.shape, cx, cy, s, size)
    img = np.full((size, size), BACKGROUND, dtype=np.float64)
    img[mask] = FILL_VALUE[label.fill]
    img += rng.normal(0.0, NOISE_STD, size=img.shape)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return ToyImage(img, label, rng_seed)


def interior_mask(label: AttributeLabel, rng_seed: int, size: int = 16) -> np.ndarray:
    """The shape mask used by ``render_sample`` for the same (label, seed)."""
    rng = np.random.default_rng(rng_seed)
    cx, cy, s = _geometry(rng, size)
    return shape_mask(label.shape, cx, cy, s, size)


def sample_dataset(n: int, seed: int, size: int = 16) -> list[ToyImage]:
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        s = derive_seed(seed, i)
        label = AttributeLabel.from_index(splitmix64(s) % 8)
        out.append(render_sample(label, s, size))
    return out


def to_tensors(images: list[ToyImage]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack into (N, 1, H, W) float32 pixels and (N,) int64 condition indices."""
    x = torch.from_numpy(np.stack([im.pixels for im in images]))[:, None]
    y = torch.tensor([im.label.index for im in images], dtype=torch.long)
    return x.contiguous(), y


def save_dataset(images: list[ToyImage], path: str | Path) -> None:
    if not images:
        raise ValueError("empty dataset")
    h, w = images[0].pixels.shape
    buf = bytearray(MAGIC)
    buf += struct.pack("<IIII", VERSION, len(images), h, w)
    for im in images:
        buf += struct.pack("<BBQ", SHAPES.index(im.label.shape), FILLS.index(im.label.fill), im.seed)
        buf += im.pixels.astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path) -> list[ToyImage]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a TOYD file")
    version, count, h, w = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 20
    rec = struct.calcsize("<BBQ")
    out = []
    for _ in range(count):
        si, fi, seed = struct.unpack_from("<BBQ", data, off)
        off += rec
        px = np.frombuffer(data, dtype="<f4", count=h * w, offset=off).reshape(h, w).astype(np.float32)
        off += 4 * h * w
        out.append(ToyImage(px, AttributeLabel(SHAPES[si], FILLS[fi]), seed))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return out
