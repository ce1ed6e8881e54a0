"""Dataset container format, synthetic sparse-multipath channels, COST2100
layout ingestion, and normalization bookkeeping.

On disk a dataset is a small binary container plus a JSON sidecar:

  header  {magic "CSIB", u32 version, u64 sample_count, u32 n_delay,
           u32 n_antennas, u32 dtype code}   (little-endian, 28 bytes)
  payload sample_count * 2 * n_delay * n_antennas float32 values, row-major
  sidecar <path>.json with normalization min/max, scenario label, source,
          seed, and any extra fields (e.g. the synthetic full sub-carrier
          count needed to invert the delay-domain truncation)

Values are stored normalized to [0,1]; the sidecar's min/max invert that
map, and reconstruction metrics are computed on de-normalized values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import to_angular_delay

MAGIC = b"CSIB"
VERSION = 1
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sIQIII")


class ContainerError(Exception):
    """Base class for container-format failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass


class DegenerateRangeError(ValueError):
    """Normalization bounds collapse to a single point."""


@dataclass(frozen=True)
class NormalizationMeta:
    vmin: float
    vmax: float

    def __post_init__(self):
        if not (np.isfinite(self.vmin) and np.isfinite(self.vmax)):
            raise DegenerateRangeError("normalization bounds must be finite")
        if self.vmin >= self.vmax:
            raise DegenerateRangeError(f"degenerate range [{self.vmin}, {self.vmax}]")


def normalize(values: np.ndarray, meta: NormalizationMeta) -> np.ndarray:
    return (values - meta.vmin) / (meta.vmax - meta.vmin)


def denormalize(values: np.ndarray, meta: NormalizationMeta) -> np.ndarray:
    return values * (meta.vmax - meta.vmin) + meta.vmin


@dataclass
class DatasetContainer:
    """In-memory dataset: normalized samples plus sidecar metadata."""

    samples: np.ndarray          # [n, 2, n_delay, n_antennas] float32 in [0,1]
    normalization: NormalizationMeta
    scenario: str = "synthetic"
    source: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 4 or self.samples.shape[1] != 2:
            raise DimensionMismatchError(
                f"samples must be [n, 2, n_delay, n_antennas], got {self.samples.shape}")

    @property
    def n_delay(self) -> int:
        return self.samples.shape[2]

    @property
    def n_antennas(self) -> int:
        return self.samples.shape[3]

    def __len__(self) -> int:
        return self.samples.shape[0]

    def denormalized(self) -> np.ndarray:
        return denormalize(self.samples.astype(np.float64), self.normalization)


def write_container(container: DatasetContainer, path: str | Path) -> None:
    path = Path(path)
    n, _, n_delay, n_antennas = container.samples.shape
    header = _HEADER.pack(MAGIC, VERSION, n, n_delay, n_antennas, DTYPE_FLOAT32)
    payload = np.ascontiguousarray(container.samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    sidecar = {
        "normalization": {"vmin": container.normalization.vmin,
                          "vmax": container.normalization.vmax},
        "scenario": container.scenario,
        "source": container.source,
        "seed": container.seed,
        "extra": container.extra,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def read_container(path: str | Path) -> DatasetContainer:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is smaller than the header")
    magic, version, count, n_delay, n_antennas, dtype_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise ContainerError(f"{path}: unknown dtype code {dtype_code}")
    if n_delay <= 0 or n_antennas <= 0:
        raise DimensionMismatchError(f"{path}: non-positive dims {n_delay}x{n_antennas}")
    expected = count * 2 * n_delay * n_antennas * 4
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: payload {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise DimensionMismatchError(f"{path}: {len(body) - expected} trailing bytes")
    samples = np.frombuffer(body, dtype="<f4").reshape(count, 2, n_delay, n_antennas).copy()

    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise ContainerError(f"{path}: missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    norm = NormalizationMeta(meta["normalization"]["vmin"], meta["normalization"]["vmax"])
    return DatasetContainer(samples=samples, normalization=norm,
                            scenario=meta.get("scenario", "unknown"),
                            source=meta.get("source", ""),
                            seed=meta.get("seed"),
                            extra=meta.get("extra", {}))


# --------------------------------------------------------------------------
# synthetic sparse-multipath channels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Sparse multipath generator settings.

    Each sample superimposes ``n_paths`` rays: integer sample delays below
    ``max_delay`` (so truncation to ``n_delay`` rows is lossless when
    ``max_delay <= n_delay``), uniform sine-spaced departure angles on a
    half-wavelength array, and complex Gaussian gains shaped by an
    exponential power-delay profile with time constant ``decay``.
    """

    count: int
    n_paths: int = 4
    max_delay: int = 24
    decay: float = 8.0
    n_subcarriers: int = 64
    n_antennas: int = 32
    n_delay: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.n_paths < 1:
            raise ValueError("count must be >= 0 and n_paths >= 1")
        if not 1 <= self.max_delay <= self.n_delay:
            raise ValueError(f"max_delay {self.max_delay} outside [1, {self.n_delay}]")
        if self.n_delay > self.n_subcarriers:
            raise ValueError(f"n_delay {self.n_delay} exceeds {self.n_subcarriers} sub-carriers")


def synth_freq_channels(config: SynthConfig) -> np.ndarray:
    """Complex [count, n_subcarriers, n_antennas] ground-truth channels."""
    rng = np.random.default_rng(config.seed)
    n = np.arange(config.n_subcarriers)[:, None]
    t = np.arange(config.n_antennas)[None, :]
    channels = np.zeros((config.count, config.n_subcarriers, config.n_antennas),
                        dtype=np.complex128)
    for i in range(config.count):
        delays = rng.integers(0, config.max_delay, size=config.n_paths)
        sines = rng.uniform(-1.0, 1.0, size=config.n_paths)
        power = np.exp(-delays / config.decay)
        gains = (rng.normal(size=config.n_paths) + 1j * rng.normal(size=config.n_paths))
        gains *= np.sqrt(power / 2.0)
        for p in range(config.n_paths):
            phase_delay = np.exp(-2j * np.pi * n * delays[p] / config.n_subcarriers)
            phase_angle = np.exp(-1j * np.pi * t * sines[p])
            channels[i] += gains[p] * phase_delay * phase_angle
    return channels


def synth_channels(config: SynthConfig) -> tuple[DatasetContainer, np.ndarray]:
    """Container of truncated angular-delay samples plus the ground truth."""
    freq = synth_freq_channels(config)
    planes = np.stack([to_angular_delay(freq[i], config.n_delay)
                       for i in range(config.count)]) if config.count else \
        np.zeros((0, 2, config.n_delay, config.n_antennas))
    if config.count:
        meta = NormalizationMeta(float(planes.min()), float(planes.max()))
    else:
        meta = NormalizationMeta(-1.0, 1.0)
    container = DatasetContainer(
        samples=normalize(planes, meta).astype(np.float32),
        normalization=meta,
        scenario="synthetic",
        source="synth",
        seed=config.seed,
        extra={"n_subcarriers": config.n_subcarriers,
               "n_paths": config.n_paths,
               "max_delay": config.max_delay,
               "decay": config.decay},
    )
    return container, freq


def partition_indices(total: int, fractions: tuple[float, ...],
                      seed: int) -> list[np.ndarray]:
    """Disjoint index splits covering [0, total); sizes follow ``fractions``."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(total)
    counts = [int(round(f * total)) for f in fractions[:-1]]
    counts.append(total - sum(counts))
    splits, start = [], 0
    for c in counts:
        splits.append(np.sort(perm[start:start + c]))
        start += c
    return splits


# --------------------------------------------------------------------------
# COST2100-layout ingestion
# --------------------------------------------------------------------------

def _load_flat_vectors(src_path: Path) -> np.ndarray:
    suffix = src_path.suffix.lower()
    if suffix == ".npy":
        return np.load(src_path)
    if suffix == ".npz":
        with np.load(src_path) as archive:
            return archive[list(archive.keys())[0]]
    if suffix == ".mat":
        from scipy.io import loadmat
        try:
            blobs = loadmat(src_path)
            arrays = [v for k, v in blobs.items()
                      if not k.startswith("__") and hasattr(v, "ndim") and v.ndim == 2]
        except NotImplementedError:  # v7.3 files are HDF5
            import h5py
            arrays = []
            with h5py.File(src_path, "r") as fh:
                for key in fh:
                    arr = np.asarray(fh[key])
                    if arr.ndim == 2:
                        arrays.append(arr.T)
        if not arrays:
            raise ContainerError(f"{src_path}: no 2-d array variable found")
        return arrays[0]
    raise ContainerError(f"{src_path}: unsupported source format {suffix!r}")


def import_cost2100(src_path: str | Path, scenario: str,
                    n_delay: int = 32, n_antennas: int = 32) -> DatasetContainer:
    """Ingest the public distribution's flattened per-sample vectors.

    Each row must hold 2 * n_delay * n_antennas reals already normalized to
    [0,1] (stored as value - 0.5 around the channel's zero); rows outside
    [-0.1, 1.1] are rejected with a count report. The sidecar records the
    0.5-centering so de-normalized metrics subtract it back out.
    """
    src_path = Path(src_path)
    vectors = np.asarray(_load_flat_vectors(src_path), dtype=np.float64)
    flat_len = 2 * n_delay * n_antennas
    if vectors.ndim != 2 or vectors.shape[1] != flat_len:
        raise DimensionMismatchError(
            f"{src_path}: expected [n, {flat_len}] vectors, got {vectors.shape}")
    bad = ~((vectors >= -0.1) & (vectors <= 1.1)).all(axis=1)
    if bad.any():
        raise ContainerError(
            f"{src_path}: {int(bad.sum())} of {len(vectors)} samples have values "
            f"outside [-0.1, 1.1]; refusing import")
    samples = vectors.reshape(-1, 2, n_delay, n_antennas).astype(np.float32)
    # the public distribution stores H + 0.5; min/max of (-0.5, 0.5) makes
    # denormalization subtract the centering without rescaling
    return DatasetContainer(samples=samples,
                            normalization=NormalizationMeta(-0.5, 0.5),
                            scenario=scenario,
                            source=str(src_path))


def export_flat_vectors(container: DatasetContainer) -> np.ndarray:
    """Inverse of :func:`import_cost2100`'s reshape, for round-trip checks."""
    n = len(container)
    return container.samples.reshape(n, -1).astype(np.float32)
