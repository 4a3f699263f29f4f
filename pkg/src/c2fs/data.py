"""Hierarchical coarse/fine datasets: synthetic generation, binary I/O and augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

MAGIC = b"C2FSDATA"
VERSION = 1
ABSENT_FINE = 0xFFFF
_HEADER = struct.Struct("<8sIQIIIII")


class DatasetFormatError(ValueError):
    """Raised when a binary dataset file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DatasetValidationError(ValueError):
    pass


@dataclass(frozen=True)
class LabelHierarchy:
    coarse_count: int
    fine_per_coarse: tuple[int, ...]
    fine_to_coarse: tuple[int, ...] = ()

    def __post_init__(self):
        fpc = tuple(int(k) for k in self.fine_per_coarse)
        object.__setattr__(self, "fine_per_coarse", fpc)
        if self.coarse_count <= 0 or len(fpc) != self.coarse_count or min(fpc) <= 0:
            raise ValueError(f"invalid hierarchy: N={self.coarse_count}, k={fpc}")
        if not self.fine_to_coarse:
            f2c = tuple(c for c, k in enumerate(fpc) for _ in range(k))
            object.__setattr__(self, "fine_to_coarse", f2c)
        f2c = tuple(int(c) for c in self.fine_to_coarse)
        object.__setattr__(self, "fine_to_coarse", f2c)
        if len(f2c) != sum(fpc):
            raise ValueError("fine_to_coarse must cover every fine class")
        counts = np.bincount(f2c, minlength=self.coarse_count)
        if len(counts) != self.coarse_count or tuple(counts) != fpc:
            raise ValueError("fine_to_coarse disagrees with fine_per_coarse")

    @classmethod
    def uniform(cls, coarse_count: int, fine_per_coarse: int) -> "LabelHierarchy":
        return cls(coarse_count, (fine_per_coarse,) * coarse_count)

    @classmethod
    def from_mapping(cls, fine_to_coarse: Sequence[int], coarse_count: Optional[int] = None):
        f2c = tuple(int(c) for c in fine_to_coarse)
        n = coarse_count if coarse_count is not None else max(f2c) + 1
        counts = np.bincount(f2c, minlength=n)
        if np.any(counts == 0):
            missing = [int(c) for c in np.flatnonzero(counts == 0)]
            raise DatasetValidationError(f"coarse classes without fine children: {missing}")
        return cls(n, tuple(int(c) for c in counts), f2c)

    @property
    def fine_count(self) -> int:
        return len(self.fine_to_coarse)

    def children(self, coarse: int) -> list[int]:
        return [f for f, c in enumerate(self.fine_to_coarse) if c == coarse]


@dataclass(frozen=True)
class LabeledExample:
    input: np.ndarray
    coarse_label: int
    fine_label: Optional[int] = None


@dataclass
class Dataset:
    """Immutable columnar store of labeled examples.

    ``inputs`` has shape ``(M, C, H, W)``; vector data uses ``H == W == 1``.
    ``fine`` holds ``-1`` where the fine label is absent.
    """

    inputs: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    hierarchy: LabelHierarchy

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (M, C, H, W); got {self.inputs.shape}")
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        self.fine = np.asarray(self.fine, dtype=np.int64)
        for arr in (self.inputs, self.coarse, self.fine):
            arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        h = self.hierarchy
        if len(self.coarse) != len(self.inputs) or len(self.fine) != len(self.inputs):
            raise DatasetValidationError("label arrays do not match input count")
        if len(self.coarse) and (self.coarse.min() < 0 or self.coarse.max() >= h.coarse_count):
            raise DatasetValidationError(
                f"coarse label out of range [0, {h.coarse_count})")
        has_fine = self.fine >= 0
        if np.any(has_fine):
            if self.fine.max() >= h.fine_count:
                raise DatasetValidationError(f"fine label out of range [0, {h.fine_count})")
            parents = np.asarray(h.fine_to_coarse)[self.fine[has_fine]]
            bad = np.flatnonzero(parents != self.coarse[has_fine])
            if len(bad):
                i = int(np.flatnonzero(has_fine)[bad[0]])
                raise DatasetValidationError(
                    f"example {i}: fine {self.fine[i]} is not a child of coarse {self.coarse[i]}")

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i: int) -> LabeledExample:
        f = int(self.fine[i])
        return LabeledExample(self.inputs[i], int(self.coarse[i]), None if f < 0 else f)

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    @property
    def is_vector(self) -> bool:
        return self.inputs.shape[2] == 1 and self.inputs.shape[3] == 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.coarse[idx], self.fine[idx], self.hierarchy)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], hierarchy: LabelHierarchy):
        inputs = np.stack([np.asarray(e.input, dtype=np.float32) for e in examples])
        if inputs.ndim == 2:
            inputs = inputs[:, :, None, None]
        coarse = [e.coarse_label for e in examples]
        fine = [-1 if e.fine_label is None else e.fine_label for e in examples]
        return cls(inputs, coarse, fine, hierarchy)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    hierarchy: LabelHierarchy = field(default_factory=lambda: LabelHierarchy.uniform(2, 2))
    intrinsic_dim: int = 16
    ambient_dim: int = 64
    coarse_radius: float = 4.0
    fine_radius: float = 2.0
    noise_sigma: float = 0.25
    seed: int = 0
    mode: str = "vector"
    image_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        if not self.fine_radius < self.coarse_radius:
            raise ValueError("fine_radius must be smaller than coarse_radius")
        if not 0 <= self.noise_sigma < self.fine_radius:
            raise ValueError("noise_sigma must be smaller than fine_radius")
        if self.mode not in ("vector", "image"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _place_centers(rng, count, dim, scale, min_dist, around=None, on_sphere=False):
    """Rejection-sample ``count`` points with pairwise distance >= min_dist."""
    centers = []
    for _ in range(count):
        for _attempt in range(10_000):
            v = rng.standard_normal(dim)
            if on_sphere:
                v = scale * v / np.linalg.norm(v)
            else:
                v = scale * v
            if around is not None:
                v = around + v
            if all(np.linalg.norm(v - c) >= min_dist for c in centers):
                centers.append(v)
                break
        else:
            raise RuntimeError("could not place well-separated centers; lower the radii")
    return np.stack(centers)


def synthetic_centers(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (coarse_centers (N, D), fine_centers (F, D)) in intrinsic space."""
    h = config.hierarchy
    rng = np.random.default_rng([config.seed, 0])
    coarse = _place_centers(rng, h.coarse_count, config.intrinsic_dim,
                            config.coarse_radius, 2.0 * config.coarse_radius)
    fine = np.zeros((h.fine_count, config.intrinsic_dim))
    for c in range(h.coarse_count):
        kids = h.children(c)
        fine[kids] = _place_centers(rng, len(kids), config.intrinsic_dim, config.fine_radius,
                                    config.fine_radius, around=coarse[c], on_sphere=True)
    return coarse, fine


def _lift(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1])
    q, _ = np.linalg.qr(rng.standard_normal((config.ambient_dim, config.intrinsic_dim)))
    return q


def _texture_bases(config: SynthConfig) -> np.ndarray:
    """Per-intrinsic-axis oriented sinusoids, shape (D, C, H, W)."""
    rng = np.random.default_rng([config.seed, 2])
    c, hgt, wid = config.image_shape
    yy, xx = np.meshgrid(np.arange(hgt) / hgt, np.arange(wid) / wid, indexing="ij")
    bases = np.zeros((config.intrinsic_dim, c, hgt, wid))
    for j in range(config.intrinsic_dim):
        freq = rng.uniform(1.0, 6.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi, size=c)
        wave = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)[None]
                      + phase[:, None, None])
        bases[j] = wave
    return bases


def render(config: SynthConfig, z: np.ndarray) -> np.ndarray:
    """Map intrinsic points ``z`` (M, D) to model inputs (M, C, H, W)."""
    if config.mode == "vector":
        x = z @ _lift(config).T
        return x[:, :, None, None]
    bases = _texture_bases(config)
    scale = config.coarse_radius * np.sqrt(config.intrinsic_dim)
    act = np.tensordot(z, bases, axes=(1, 0)) / scale
    return 1.0 / (1.0 + np.exp(-2.0 * act))


def generate_synthetic(config: SynthConfig, count_per_fine: int, split: str = "train") -> Dataset:
    """Nested-Gaussian hierarchical dataset.

    Centers depend only on ``config.seed``; the per-example noise stream also
    depends on ``split`` so train and test splits share classes but not samples.
    Examples are grouped by fine class in ascending order.
    """
    if count_per_fine <= 0:
        raise ValueError("count_per_fine must be positive")
    if config.mode == "vector" and config.ambient_dim < config.intrinsic_dim:
        raise ValueError(
            f"ambient_dim {config.ambient_dim} < intrinsic dimension {config.intrinsic_dim}")
    h = config.hierarchy
    _, fine_centers = synthetic_centers(config)
    split_key = {"train": 0, "test": 1, "probe": 2}.get(split)
    if split_key is None:
        split_key = int.from_bytes(split.encode()[:4].ljust(4, b"\0"), "little")
    rng = np.random.default_rng([config.seed, 3, split_key])
    fine = np.repeat(np.arange(h.fine_count), count_per_fine)
    z = fine_centers[fine] + config.noise_sigma * rng.standard_normal((len(fine), config.intrinsic_dim))
    coarse = np.asarray(h.fine_to_coarse)[fine]
    return Dataset(render(config, z), coarse, fine, h)


# ---------------------------------------------------------------- binary I/O


def write_dataset(path, dataset: Dataset) -> None:
    m, c, hgt, wid = dataset.inputs.shape
    h = dataset.hierarchy
    rec = np.dtype([("coarse", "<u2"), ("fine", "<u2"), ("pix", "<f4", (c * hgt * wid,))])
    body = np.zeros(m, dtype=rec)
    body["coarse"] = dataset.coarse
    body["fine"] = np.where(dataset.fine < 0, ABSENT_FINE, dataset.fine)
    body["pix"] = dataset.inputs.reshape(m, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m, c, hgt, wid, h.coarse_count, h.fine_count))
        fh.write(body.tobytes())


@dataclass(frozen=True)
class DatasetMeta:
    """Optional expectations checked against a file header."""

    shape: Optional[tuple[int, int, int]] = None
    coarse_count: Optional[int] = None
    fine_count: Optional[int] = None


def read_header(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(buf)} < {_HEADER.size} bytes", len(buf))
    magic, version, count, c, hgt, wid, n_coarse, n_fine = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 8)
    if min(c, hgt, wid) == 0:
        raise DatasetFormatError(f"zero-sized sample shape {(c, hgt, wid)}", 20)
    if n_coarse == 0 or n_coarse >= ABSENT_FINE or n_fine >= ABSENT_FINE:
        raise DatasetFormatError(f"invalid label counts ({n_coarse}, {n_fine})", 32)
    return dict(count=count, shape=(c, hgt, wid), coarse_count=n_coarse, fine_count=n_fine)


def load_image_dataset(path, meta: Optional[DatasetMeta] = None) -> Dataset:
    """Load a ``C2FSDATA`` file; pixel values are expected in [0, 1]."""
    buf = Path(path).read_bytes()
    hdr = read_header(buf)
    c, hgt, wid = hdr["shape"]
    rec = np.dtype([("coarse", "<u2"), ("fine", "<u2"), ("pix", "<f4", (c * hgt * wid,))])
    expected = _HEADER.size + hdr["count"] * rec.itemsize
    if len(buf) != expected:
        raise DatasetFormatError(
            f"payload size mismatch: header declares {hdr['count']} records "
            f"({expected} bytes), file has {len(buf)}", min(len(buf), expected))
    if meta is not None:
        for key in ("shape", "coarse_count", "fine_count"):
            want = getattr(meta, key)
            if want is not None and tuple(np.atleast_1d(want)) != tuple(np.atleast_1d(hdr[key])):
                raise DatasetValidationError(f"{key}: expected {want}, file has {hdr[key]}")
    body = np.frombuffer(buf, dtype=rec, count=hdr["count"], offset=_HEADER.size)
    coarse = body["coarse"].astype(np.int64)
    fine = body["fine"].astype(np.int64)
    fine[fine == ABSENT_FINE] = -1
    n_coarse, n_fine = hdr["coarse_count"], hdr["fine_count"]
    bad = np.flatnonzero(coarse >= n_coarse)
    if len(bad):
        raise DatasetValidationError(
            f"record {bad[0]}: coarse label {coarse[bad[0]]} outside [0, {n_coarse})")
    bad = np.flatnonzero(fine >= n_fine)
    if len(bad):
        raise DatasetValidationError(
            f"record {bad[0]}: fine label {fine[bad[0]]} outside [0, {n_fine})")
    pix = body["pix"].reshape(-1, c, hgt, wid)
    if not np.all(np.isfinite(pix)):
        raise DatasetValidationError("non-finite pixel values")
    f2c = np.full(n_fine, -1)
    for f, co in zip(fine[fine >= 0], coarse[fine >= 0]):
        if f2c[f] not in (-1, co):
            raise DatasetValidationError(f"fine label {f} appears under coarse {f2c[f]} and {co}")
        f2c[f] = co
    if n_fine and np.all(f2c >= 0):
        hierarchy = LabelHierarchy.from_mapping(f2c, n_coarse)
    else:
        # fine labels missing or incomplete: one placeholder fine class per coarse class
        hierarchy = LabelHierarchy.uniform(n_coarse, 1)
        if np.any(fine >= 0):
            raise DatasetValidationError("partial fine-label coverage is not supported")
    return Dataset(pix.copy(), coarse, fine, hierarchy)


load_dataset = load_image_dataset


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation strengths. Magnitudes are inherited defaults, not tuned."""

    crop_scale_min: float = 0.6
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    vector_jitter: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0, 1)[None, :, None]
    wx = np.clip(xs - x0, 0, 1)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _augment_image(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    c, h, w = img.shape
    out = img
    if cfg.crop_scale_min < 1.0:
        area = rng.uniform(cfg.crop_scale_min, 1.0) * h * w
        ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        ch = int(round(np.sqrt(area / ratio)))
        cw = int(round(np.sqrt(area * ratio)))
        ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
        top = rng.integers(0, h - ch + 1)
        left = rng.integers(0, w - cw + 1)
        out = _resize_bilinear(out[:, top:top + ch, left:left + cw], h, w)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.brightness > 0:
        out = out * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    if cfg.contrast > 0:
        mean = out.mean()
        out = (out - mean) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + mean
    if cfg.saturation > 0 and c == 3:
        gray = out.mean(axis=0, keepdims=True)
        out = (out - gray) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation) + gray
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def augment_array(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """One stochastic view of a batch ``(B, C, H, W)``."""
    if x.shape[2] == 1 and x.shape[3] == 1:
        if cfg.vector_jitter == 0:
            return x.copy()
        return (x + cfg.vector_jitter * rng.standard_normal(x.shape)).astype(x.dtype)
    return np.stack([_augment_image(img, rng, cfg) for img in x])


def augment(example: LabeledExample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> tuple[LabeledExample, LabeledExample]:
    """Two independent views ``(I_q, I_k)`` of one example, labels preserved.

    Vector inputs get additive Gaussian jitter instead of crop/flip/colour ops.
    """
    x = np.asarray(example.input)
    batch = x.reshape((1,) + x.shape) if x.ndim == 3 else x.reshape(1, -1, 1, 1)
    views = []
    for _ in range(2):
        v = augment_array(batch, rng, cfg)[0].reshape(x.shape)
        views.append(LabeledExample(v, example.coarse_label, example.fine_label))
    return views[0], views[1]
