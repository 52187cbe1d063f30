"""Synthetic moving-sprite videos, MNIST IDX ingestion, and the VSEQ container.

VSEQ layout (little-endian)::

    b"VSEQ"  u8 version=1  u32 N  u32 L  u32 C0  u32 H0  u32 W0
    N*L*C0*H0*W0 float32 values, row-major [seq][frame][channel][row][col]
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DataFormatError",
    "SpriteWorldConfig",
    "Sprite",
    "Dataset",
    "sprite_bitmap",
    "render_sequence",
    "generate_sprites",
    "read_idx",
    "write_vseq",
    "read_vseq",
    "split",
]

VSEQ_MAGIC = b"VSEQ"
VSEQ_VERSION = 1
_VSEQ_HEADER = struct.Struct("<4sB5I")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPRITE_KINDS = ("digit_from_idx", "disk", "square", "cross")


class DataFormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass(frozen=True)
class SpriteWorldConfig:
    height: int = 16
    width: int = 16
    num_sprites: int = 2
    kind: str = "disk"
    sprite_size: int = 5
    speed_min: float = 0.5
    speed_max: float = 1.5
    seq_len: int = 25
    num_sequences: int = 2048
    seed: int = 0
    bounce: bool = True

    def __post_init__(self):
        if self.kind not in SPRITE_KINDS:
            raise ValueError(f"sprite kind must be one of {SPRITE_KINDS}, got {self.kind!r}")
        if self.kind != "digit_from_idx" and not 1 <= self.sprite_size < min(self.height, self.width):
            raise ValueError(f"sprite size {self.sprite_size} must be smaller than the {self.height}x{self.width} canvas")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.num_sequences < 1 or self.num_sprites < 1:
            raise ValueError("num_sequences and num_sprites must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpriteWorldConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sprite-world keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sprite:
    """A bitmap moving with constant velocity; position is the top-left corner as (x, y)."""

    bitmap: np.ndarray
    position: Tuple[float, float]
    velocity: Tuple[float, float]


@dataclass
class Dataset:
    sequences: np.ndarray  # [N, L, C0, H0, W0] float32 in [0, 1]
    split: str = "all"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sequences.ndim != 5:
            raise ValueError(f"sequences must be [N, L, C0, H0, W0], got shape {self.sequences.shape}")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    @property
    def frame_shape(self) -> tuple:
        return self.sequences.shape[2:]


def sprite_bitmap(kind: str, size: int) -> np.ndarray:
    """Binary size x size bitmap for the geometric sprite kinds."""
    if kind == "square":
        return np.ones((size, size), dtype=np.float32)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        return (((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2.0) ** 2).astype(np.float32)
    if kind == "cross":
        bar = max(1, size // 3)
        lo = (size - bar) // 2
        img = np.zeros((size, size), dtype=np.float32)
        img[lo:lo + bar, :] = 1.0
        img[:, lo:lo + bar] = 1.0
        return img
    raise ValueError(f"no geometric bitmap for sprite kind {kind!r}")


def _paste_max(canvas: np.ndarray, bitmap: np.ndarray, x: float, y: float) -> None:
    h, w = bitmap.shape
    H, W = canvas.shape
    r0, c0 = int(round(y)), int(round(x))
    r_lo, c_lo = max(r0, 0), max(c0, 0)
    r_hi, c_hi = min(r0 + h, H), min(c0 + w, W)
    if r_lo >= r_hi or c_lo >= c_hi:
        return
    patch = bitmap[r_lo - r0:r_hi - r0, c_lo - c0:c_hi - c0]
    np.maximum(canvas[r_lo:r_hi, c_lo:c_hi], patch, out=canvas[r_lo:r_hi, c_lo:c_hi])


def render_sequence(sprites: Sequence[Sprite], height: int, width: int, seq_len: int,
                    bounce: bool = True) -> np.ndarray:
    """Move and draw sprites for ``seq_len`` frames -> [L, 1, H, W] float32.

    Overlaps composite by per-pixel max. With ``bounce`` a sprite that would
    leave the canvas is clamped to the wall and the offending velocity
    component flips sign in the same tick.
    """
    out = np.zeros((seq_len, 1, height, width), dtype=np.float32)
    state = [[float(s.position[0]), float(s.position[1]), float(s.velocity[0]), float(s.velocity[1])]
             for s in sprites]
    for t in range(seq_len):
        if t:
            for s, st in zip(sprites, state):
                h, w = s.bitmap.shape
                st[0] += st[2]
                st[1] += st[3]
                if bounce:
                    for pos, vel, limit in ((0, 2, width - w), (1, 3, height - h)):
                        if st[pos] < 0:
                            st[pos], st[vel] = 0.0, -st[vel]
                        elif st[pos] > limit:
                            st[pos], st[vel] = float(limit), -st[vel]
        for s, st in zip(sprites, state):
            _paste_max(out[t, 0], s.bitmap, st[0], st[1])
    return out


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img
    rows = (np.arange(size) * img.shape[0] / size).astype(int)
    cols = (np.arange(size) * img.shape[1] / size).astype(int)
    return img[np.ix_(rows, cols)]


def generate_sprites(cfg: SpriteWorldConfig, digit_bank: Optional[np.ndarray] = None) -> Dataset:
    """Generate ``cfg.num_sequences`` moving-sprite clips, fully determined by ``cfg.seed``.

    Each sequence draws from its own stream seeded by (seed, index), so any
    subset can be regenerated independently.
    """
    if cfg.kind == "digit_from_idx":
        if digit_bank is None or len(digit_bank) == 0:
            raise ValueError("sprite kind digit_from_idx needs a digit bank (see read_idx)")
        if cfg.sprite_size >= min(cfg.height, cfg.width):
            raise ValueError(f"sprite size {cfg.sprite_size} must be smaller than the canvas")
        bank = [None]
    else:
        bank = [sprite_bitmap(cfg.kind, cfg.sprite_size)]

    seqs = np.empty((cfg.num_sequences, cfg.seq_len, 1, cfg.height, cfg.width), dtype=np.float32)
    size = cfg.sprite_size
    for i in range(cfg.num_sequences):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, i))))
        sprites = []
        for _ in range(cfg.num_sprites):
            if cfg.kind == "digit_from_idx":
                bitmap = _resize_nearest(digit_bank[rng.integers(len(digit_bank))], size)
            else:
                bitmap = bank[0]
            pos = (rng.uniform(0, cfg.width - size), rng.uniform(0, cfg.height - size))
            angle = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(cfg.speed_min, cfg.speed_max)
            sprites.append(Sprite(bitmap, pos, (speed * math.cos(angle), speed * math.sin(angle))))
        seqs[i] = render_sequence(sprites, cfg.height, cfg.width, cfg.seq_len, cfg.bounce)
    np.clip(seqs, 0.0, 1.0, out=seqs)
    return Dataset(seqs, "all", {"config_hash": cfg.digest(), "seed": cfg.seed, "generator": cfg.to_dict()})


# -- IDX ------------------------------------------------------------------

def _read_idx_file(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read IDX file {path}: {exc.strerror}") from exc
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header != count:
        raise DataFormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(images_path, labels_path=None):
    """Load MNIST-style digits as float32 bitmaps in [0, 1].

    Returns ``images`` or ``(images, labels)`` when a label file is given.
    """
    images = _read_idx_file(images_path, IDX_IMAGES_MAGIC).astype(np.float32) / 255.0
    if labels_path is None:
        return images
    labels = _read_idx_file(labels_path, IDX_LABELS_MAGIC)
    if len(labels) != len(images):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels.astype(np.int64)


# -- VSEQ -----------------------------------------------------------------

def write_vseq(ds: Dataset, path) -> None:
    seqs = np.asarray(ds.sequences)
    if not np.isfinite(seqs).all():
        raise ValueError("dataset contains non-finite values")
    N, L, C0, H0, W0 = seqs.shape
    with open(path, "wb") as fh:
        fh.write(_VSEQ_HEADER.pack(VSEQ_MAGIC, VSEQ_VERSION, N, L, C0, H0, W0))
        fh.write(np.ascontiguousarray(seqs, dtype="<f4").tobytes())


def read_vseq(path, split_tag: str = "all") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _VSEQ_HEADER.size:
        raise DataFormatError(f"{path}: too short for a VSEQ header ({len(raw)} bytes)")
    magic, version, *dims = _VSEQ_HEADER.unpack_from(raw)
    if magic != VSEQ_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VSEQ_VERSION:
        raise DataFormatError(f"{path}: unsupported VSEQ version {version}")
    expected = math.prod(dims) * 4
    if len(raw) - _VSEQ_HEADER.size != expected:
        raise DataFormatError(f"{path}: payload is {len(raw) - _VSEQ_HEADER.size} bytes, header implies {expected}")
    seqs = np.frombuffer(raw, dtype="<f4", offset=_VSEQ_HEADER.size).astype(np.float32).reshape(dims)
    if not np.isfinite(seqs).all():
        raise DataFormatError(f"{path}: non-finite values in payload")
    outside = (seqs < 0) | (seqs > 1)
    if outside.any():
        warnings.warn(f"{path}: {int(outside.sum())} values outside [0, 1] clamped", stacklevel=2)
        np.clip(seqs, 0.0, 1.0, out=seqs)
    digest = hashlib.sha256(raw).hexdigest()[:16]
    return Dataset(seqs, split_tag, {"file": str(path), "sha256": digest})


def split(ds: Dataset, train_frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle split at sequence granularity -> (train, eval)."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    N = len(ds)
    if N < 2:
        raise ValueError("need at least 2 sequences to split")
    n_train = min(max(int(round(N * train_frac)), 1), N - 1)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(N)
    tr, ev = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    prov = dict(ds.provenance, split_seed=seed, train_frac=train_frac)
    return (Dataset(ds.sequences[tr], "train", dict(prov, indices="train")),
            Dataset(ds.sequences[ev], "eval", dict(prov, indices="eval")))
