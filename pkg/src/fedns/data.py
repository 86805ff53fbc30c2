"""Dataset loading/synthesis, client partitioning and input-space corruption."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataConsistencyError, DataFormatError, PartitionError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_DIRICHLET_MAX_RETRIES = 200


class Label(str, Enum):
    CLEAN = "clean"
    NOISY = "noisy"


class Severity(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class DistortionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    GAUSSIAN_BLUR = "gaussian_blur"
    MOTION_BLUR = "motion_blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    SATURATE = "saturate"
    PIXELATE = "pixelate"
    LABEL_FLIP = "label_flip"


class PatchKind(str, Enum):
    BLACK_PATCH = "black_patch"
    GAUSSIAN_PATCH = "gaussian_patch"
    PROCEDURAL_PATCH = "procedural_patch"


CorruptionKind = DistortionKind | PatchKind

_ALL_KINDS = {k.value: k for k in DistortionKind} | {k.value: k for k in PatchKind}


def kind_from_name(name: str) -> CorruptionKind:
    try:
        return _ALL_KINDS[name]
    except KeyError:
        raise ValueError(f"unknown corruption kind {name!r}") from None


# Per-kind intensity parameter at each severity tier. Each entry is
# (low, medium, high); the meaning of the number depends on the kind.
_SEVERITY_PARAMS: dict[DistortionKind, tuple[float, float, float]] = {
    DistortionKind.GAUSSIAN_NOISE: (0.08, 0.18, 0.38),  # additive sigma
    DistortionKind.SHOT_NOISE: (60.0, 12.0, 3.0),  # photons per unit intensity
    DistortionKind.IMPULSE_NOISE: (0.03, 0.09, 0.27),  # fraction of pixels flipped
    DistortionKind.DEFOCUS_BLUR: (1, 3, 6),  # disk radius, px
    DistortionKind.GAUSSIAN_BLUR: (1, 3, 6),  # sigma, kernel size 6*sigma+1
    DistortionKind.MOTION_BLUR: (3, 9, 15),  # streak length, px
    DistortionKind.CONTRAST: (0.4, 0.2, 0.1),  # scale about the image mean
    DistortionKind.BRIGHTNESS: (0.1, 0.3, 0.5),  # additive offset
    DistortionKind.SATURATE: (0.3, 0.6, 0.9),  # channel-mix strength
    DistortionKind.PIXELATE: (2, 4, 8),  # downscale factor
}

_SEVERITY_INDEX = {Severity.LOW: 0, Severity.MEDIUM: 1, Severity.HIGH: 2}


def severity_param(kind: DistortionKind, severity: Severity) -> float:
    return _SEVERITY_PARAMS[kind][_SEVERITY_INDEX[severity]]


@dataclass
class Dataset:
    """A labelled image collection: samples [N, C, H, W] in [0, 1]."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.samples.shape[0]

    def validate(self) -> None:
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be [N, C, H, W], got shape {self.samples.shape}")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("sample/label counts differ")
        if len(self) and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError("sample values outside [0, 1]")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")


@dataclass(frozen=True)
class CorruptionSpec:
    """What to corrupt and how hard.

    kinds is stored as a sorted, de-duplicated tuple so that the uniform
    per-sample kind draw is independent of construction order.
    """

    kinds: tuple[CorruptionKind, ...]
    severity: Severity = Severity.HIGH
    noise_level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(sorted(set(self.kinds), key=lambda k: k.value)))
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.noise_level > 0 and not self.kinds:
            raise ValueError("kinds must be non-empty when noise_level > 0")


@dataclass
class ClientDataset:
    """One client's shard with per-sample corruption bookkeeping."""

    client_id: int
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    corrupted_mask: np.ndarray
    spec: CorruptionSpec | None = None

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def truth_tag(self) -> Label:
        return Label.NOISY if bool(self.corrupted_mask.any()) else Label.CLEAN

    @property
    def noise_level(self) -> float:
        return float(self.corrupted_mask.sum()) / len(self)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, offset: int, path: Path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"{path}: truncated at byte {offset + len(buf)}, expected {n} bytes from offset {offset}"
        )
    return buf


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an MNIST-family IDX image/label file pair.

    Pixels are rescaled from [0, 255] bytes to [0, 1] floats; the result has
    shape [N, 1, H, W]. Files may be gzip-compressed (.gz).
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(images_path) as f:
        header = _read_exact(f, 16, 0, images_path)
        magic, n_images, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        pixels = _read_exact(f, n_images * rows * cols, 16, images_path)
    with _open_maybe_gzip(labels_path) as f:
        header = _read_exact(f, 8, 0, labels_path)
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        raw_labels = _read_exact(f, n_labels, 8, labels_path)

    if n_images != n_labels:
        raise DataConsistencyError(
            f"{images_path} declares {n_images} images but {labels_path} declares {n_labels} labels"
        )

    samples = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64) / 255.0
    samples = samples.reshape(n_images, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    ds = Dataset(samples=samples, labels=labels, num_classes=int(labels.max()) + 1 if n_images else 0)
    ds.validate()
    return ds


_TEMPLATE_AMPLITUDE = 0.08


def _class_template(c: int, side: int) -> np.ndarray:
    # Fixed per-class pattern: a small-amplitude, pixel-scale (high-frequency)
    # code around mid-gray. Class information deliberately lives where blurs
    # and photometric distortions destroy it, and the mean is 0.5 for every
    # class so brightness carries no label signal.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(c, side)))
    z = rng.normal(0.0, 1.0, size=(side, side))
    z = (z - z.mean()) / z.std()
    return np.clip(0.5 + _TEMPLATE_AMPLITUDE * z, 0.0, 1.0)


def synth_blobs(num_classes: int, per_class: int, side: int, sigma: float, seed: int) -> Dataset:
    """Synthesize a toy grayscale dataset: per-class template plus pixel jitter."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if side < 4:
        raise ValueError("side must be >= 4")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    templates = np.stack([_class_template(c, side) for c in range(num_classes)])
    rng = np.random.default_rng(seed)
    jitter = rng.normal(0.0, sigma, size=(num_classes, per_class, 1, side, side)) if sigma > 0 else 0.0
    samples = templates[:, None, None, :, :] + jitter
    samples = np.clip(samples, 0.0, 1.0).reshape(num_classes * per_class, 1, side, side)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(samples=samples, labels=labels, num_classes=num_classes)


def _shard(d: Dataset, client_id: int, idx: np.ndarray) -> ClientDataset:
    return ClientDataset(
        client_id=client_id,
        samples=d.samples[idx],
        labels=d.labels[idx],
        num_classes=d.num_classes,
        corrupted_mask=np.zeros(len(idx), dtype=bool),
    )


def partition_iid(d: Dataset, num_clients: int, seed: int) -> list[ClientDataset]:
    """Seeded shuffle-split into shards whose sizes differ by at most one."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > len(d):
        raise ValueError(f"cannot split {len(d)} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(d))
    return [_shard(d, k, idx) for k, idx in enumerate(np.array_split(perm, num_clients))]


def partition_dirichlet(d: Dataset, num_clients: int, alpha: float, seed: int) -> list[ClientDataset]:
    """Label-skewed partition: per class, client proportions ~ Dirichlet(alpha).

    Allocations leaving any client empty are resampled (bounded retries).
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if num_clients > len(d):
        raise ValueError(f"cannot split {len(d)} samples across {num_clients} clients")
    rng = np.random.default_rng(seed)
    class_indices = [np.flatnonzero(d.labels == c) for c in range(d.num_classes)]
    for _ in range(_DIRICHLET_MAX_RETRIES):
        per_client: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in class_indices:
            if len(idx) == 0:
                continue
            shuffled = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, chunk in enumerate(np.split(shuffled, cuts)):
                per_client[k].append(chunk)
        shard_idx = [np.concatenate(parts) if parts else np.empty(0, dtype=np.int64) for parts in per_client]
        if all(len(s) > 0 for s in shard_idx):
            return [_shard(d, k, idx) for k, idx in enumerate(shard_idx)]
    raise PartitionError(
        f"dirichlet partition left a client empty in {_DIRICHLET_MAX_RETRIES} attempts "
        f"(N={len(d)}, K={num_clients}, alpha={alpha})"
    )


def _conv2(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Reflect boundary keeps normalized kernels constant-preserving.
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in image])


def _disk_kernel(radius: int) -> np.ndarray:
    yy, xx = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    k = (yy * yy + xx * xx <= radius * radius).astype(np.float64)
    return k / k.sum()


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for i in range(length):
        t = i - c
        row = int(np.rint(c + t * np.sin(angle)))
        col = int(np.rint(c + t * np.cos(angle)))
        k[min(max(row, 0), length - 1), min(max(col, 0), length - 1)] += 1.0
    return k / k.sum()


def apply_distortion(
    image: np.ndarray, kind: DistortionKind, severity: Severity, rng: np.random.Generator
) -> np.ndarray:
    """Apply one distortion to a [C, H, W] image in [0, 1]; output stays in range."""
    if kind == DistortionKind.LABEL_FLIP:
        raise ValueError("label_flip operates on labels and is handled by corrupt_client")
    if kind not in _SEVERITY_PARAMS:
        raise ValueError(f"unknown distortion kind {kind!r}")
    p = severity_param(kind, severity)
    channels, height, width = image.shape

    if kind == DistortionKind.GAUSSIAN_NOISE:
        out = image + rng.normal(0.0, p, size=image.shape)
    elif kind == DistortionKind.SHOT_NOISE:
        out = rng.poisson(image * p).astype(np.float64) / p
    elif kind == DistortionKind.IMPULSE_NOISE:
        out = image.copy()
        n_flip = _round_half_up(p * image.size)
        flat = rng.choice(image.size, size=n_flip, replace=False)
        out.reshape(-1)[flat] = rng.integers(0, 2, size=n_flip).astype(np.float64)
    elif kind == DistortionKind.DEFOCUS_BLUR:
        out = _conv2(image, _disk_kernel(int(p)))
    elif kind == DistortionKind.GAUSSIAN_BLUR:
        out = ndimage.gaussian_filter(image, sigma=(0.0, p, p), truncate=3.0, mode="reflect")
    elif kind == DistortionKind.MOTION_BLUR:
        out = _conv2(image, _motion_kernel(int(p), rng.uniform(0.0, np.pi)))
    elif kind == DistortionKind.CONTRAST:
        mean = image.mean()
        out = mean + p * (image - mean)
    elif kind == DistortionKind.BRIGHTNESS:
        out = image + p
    elif kind == DistortionKind.SATURATE:
        if channels == 1:
            return image.copy()
        gray = image.mean(axis=0, keepdims=True)
        out = gray + (1.0 + p) * (image - gray)
    elif kind == DistortionKind.PIXELATE:
        f = int(p)
        rows = (np.arange(height) // f) * f
        cols = (np.arange(width) // f) * f
        out = image[:, rows[:, None], cols[None, :]]
    else:  # pragma: no cover
        raise ValueError(f"unhandled distortion kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def _bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    m = grid.shape[0]
    ys = np.linspace(0.0, m - 1.0, height)
    xs = np.linspace(0.0, m - 1.0, width)
    y0 = np.clip(ys.astype(int), 0, m - 2)
    x0 = np.clip(xs.astype(int), 0, m - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def apply_patch(image: np.ndarray, kind: PatchKind, rng: np.random.Generator) -> np.ndarray:
    """Replace the entire image with a patch; the label stays untouched."""
    channels, height, width = image.shape
    if kind == PatchKind.BLACK_PATCH:
        return np.zeros_like(image)
    if kind == PatchKind.GAUSSIAN_PATCH:
        return np.clip(rng.normal(0.5, 0.25, size=image.shape), 0.0, 1.0)
    if kind == PatchKind.PROCEDURAL_PATCH:
        field = np.zeros((channels, height, width))
        for ch in range(channels):
            for octave in range(3):
                m = 2 ** (octave + 1) + 1
                lattice = rng.uniform(0.0, 1.0, size=(m, m))
                field[ch] += _bilinear_upsample(lattice, height, width) / (2.0**octave)
        lo, hi = field.min(), field.max()
        if hi - lo < 1e-12:  # cannot happen with a real rng; avoid div by zero
            return np.full_like(image, 0.5)
        return (field - lo) / (hi - lo)
    raise ValueError(f"unknown patch kind {kind!r}")


def corrupt_client(c: ClientDataset, spec: CorruptionSpec) -> ClientDataset:
    """Corrupt a seeded sample subset of one shard according to spec.

    Exactly round-half-up(noise_level * len(c)) samples are picked without
    replacement; each gets a kind drawn uniformly from spec.kinds.
    """
    n = len(c)
    samples = c.samples.copy()
    labels = c.labels.copy()
    mask = np.zeros(n, dtype=bool)
    count = _round_half_up(spec.noise_level * n)
    if count > 0:
        rng = np.random.default_rng(spec.seed)
        chosen = np.sort(rng.choice(n, size=count, replace=False))
        for i in chosen:
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            if kind == DistortionKind.LABEL_FLIP:
                new = int(rng.integers(c.num_classes - 1))
                labels[i] = new + 1 if new >= labels[i] else new
            elif isinstance(kind, PatchKind):
                samples[i] = apply_patch(samples[i], kind, rng)
            else:
                samples[i] = apply_distortion(samples[i], kind, spec.severity, rng)
            mask[i] = True
    return ClientDataset(
        client_id=c.client_id,
        samples=samples,
        labels=labels,
        num_classes=c.num_classes,
        corrupted_mask=mask,
        spec=spec,
    )


def write_shard_manifest(clients: list[ClientDataset], path: str | Path) -> None:
    """One JSONL record per client: id, size, truth tag, noise level, kinds, seed."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for c in clients:
            record = {
                "client_id": c.client_id,
                "size": len(c),
                "truth_tag": c.truth_tag.value,
                "noise_level": c.noise_level,
                "kinds": [k.value for k in c.spec.kinds] if c.spec else [],
                "seed": c.spec.seed if c.spec else None,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
