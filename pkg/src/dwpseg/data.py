"""Synthetic two-domain lesion volumes, the MVOL1 file format and split handling.

The source domain mimics small scattered plaques (many tiny bright
ellipsoids); the target domain mimics a tumour (one or two large, fainter
blobs under a different intensity gamma). Lesion interiors in both domains
carry the same texture statistics, so local filters learned on one domain
are informative on the other.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

MAGIC = b"MVOL1\n"
DOMAINS = ("source", "target")
MIN_DIM = 16
MAX_MASK_RETRIES = 20


@dataclass(frozen=True)
class LesionModel:
    count: tuple[int, int]
    radius: tuple[float, float]
    contrast: float
    gamma: float


LESIONS = {
    "source": LesionModel(count=(3, 8), radius=(1.0, 3.0), contrast=0.35, gamma=1.0),
    "target": LesionModel(count=(1, 2), radius=(4.0, 8.0), contrast=0.20, gamma=1.5),
}

BACKGROUND_LEVEL = 0.45
BACKGROUND_SPREAD = 0.08
BACKGROUND_SMOOTHING = 2.0
WHITE_NOISE = 0.02
TEXTURE_SMOOTHING = 1.0
TEXTURE_DEPTH = 0.3


class VolumeFormatError(ValueError):
    code = "format"


class BadMagicError(VolumeFormatError):
    code = "bad_magic"


class TruncatedError(VolumeFormatError):
    code = "truncated"


class PayloadSizeError(VolumeFormatError):
    code = "payload_size_mismatch"


@dataclass(eq=False)
class Volume:
    intensities: np.ndarray  # float32 (D,H,W) in [0,1]
    mask: np.ndarray  # uint8 (D,H,W) in {0,1}
    domain: str
    id: str

    def __post_init__(self):
        if self.intensities.shape != self.mask.shape:
            raise ValueError(
                f"intensity dims {self.intensities.shape} != mask dims {self.mask.shape}"
            )
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.id == other.id and self.domain == other.domain
                and self.intensities.dtype == other.intensities.dtype
                and np.array_equal(self.intensities, other.intensities)
                and np.array_equal(self.mask, other.mask))


def substream(seed: int, key: str) -> np.random.Generator:
    """Independent generator for ``key`` under a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(key.encode())]))


def _smooth_field(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _ellipsoid(dims, center, radii, rot: np.ndarray) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1)
    local = (grid - center) @ rot  # coordinates in the ellipsoid frame
    return ((local / radii) ** 2).sum(-1) <= 1.0


def gen_volume(domain: str, dims: Sequence[int] = (32, 32, 32),
               rng: np.random.Generator | None = None, volume_id: str = "") -> Volume:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise ValueError(f"dims must be three extents >= {MIN_DIM}, got {dims}")
    rng = np.random.default_rng() if rng is None else rng
    model = LESIONS[domain]

    image = (BACKGROUND_LEVEL
             + BACKGROUND_SPREAD * _smooth_field(rng, dims, BACKGROUND_SMOOTHING))
    texture = _smooth_field(rng, dims, TEXTURE_SMOOTHING)

    for _ in range(MAX_MASK_RETRIES):
        mask = np.zeros(dims, dtype=bool)
        n = int(rng.integers(model.count[0], model.count[1] + 1))
        for _ in range(n):
            radii = rng.uniform(*model.radius, size=3)
            # lesions may touch the border only when the grid is smaller than the lesion
            margin = min(np.ceil(radii.max()), (min(dims) - 1) / 2)
            center = np.array([rng.uniform(margin, d - 1 - margin) for d in dims])
            rot = Rotation.random(random_state=rng).as_matrix()
            mask |= _ellipsoid(dims, center, radii, rot)
        if mask.any():
            break
    else:
        raise RuntimeError(f"could not draw a nonempty {domain} mask")

    image = image + mask * model.contrast * (1.0 + TEXTURE_DEPTH * texture)
    image = image + WHITE_NOISE * rng.standard_normal(dims)
    image = np.clip(image, 0.0, 1.0) ** model.gamma
    return Volume(image.astype(np.float32), mask.astype(np.uint8), domain, volume_id)


# --------------------------------------------------------------------------
# MVOL1


def write_volume(v: Volume, path: str | os.PathLike) -> None:
    header = {"dims": list(v.dims), "domain": v.domain, "id": v.id}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(v.intensities, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(v.mask, dtype=np.uint8).tobytes())


def read_volume(path: str | os.PathLike) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise BadMagicError(f"{path}: bad magic")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise TruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
        dims = tuple(int(d) for d in header["dims"])
        domain, vid = header["domain"], header["id"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: invalid dims {dims}")
    n = int(np.prod(dims))
    payload = raw[end + 1:]
    if len(payload) != 5 * n:
        raise PayloadSizeError(
            f"{path}: payload size mismatch, header dims {dims} need {5 * n} bytes, "
            f"found {len(payload)}"
        )
    intens = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(dims).astype(np.float32)
    mask = np.frombuffer(payload[4 * n:], dtype=np.uint8).reshape(dims).copy()
    if mask.max(initial=0) > 1:
        raise VolumeFormatError(f"{path}: mask is not binary")
    return Volume(intens, mask, domain, vid)


# --------------------------------------------------------------------------
# pools and splits


def volume_ids(domain: str, count: int) -> list[str]:
    prefix = "src" if domain == "source" else "tgt"
    return [f"{prefix}-{i:03d}" for i in range(count)]


def generate_pool(domain: str, count: int, seed: int,
                  dims: Sequence[int] = (32, 32, 32)) -> list[Volume]:
    return [gen_volume(domain, dims, substream(seed, vid), vid)
            for vid in volume_ids(domain, count)]


def write_dataset(out_dir: str | os.PathLike, seed: int, n_source: int = 40,
                  n_target: int = 70, dims: Sequence[int] = (32, 32, 32)) -> dict:
    """Generate both pools under ``out_dir`` and write an index.json."""
    out_dir = Path(out_dir)
    index = {"seed": int(seed), "dims": list(dims), "source": [], "target": []}
    for domain, count in (("source", n_source), ("target", n_target)):
        for v in generate_pool(domain, count, seed, dims):
            rel = f"{domain}/{v.id}.mvol"
            write_volume(v, out_dir / rel)
            index[domain].append(v.id)
    (out_dir / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return index


def load_dataset(data_dir: str | os.PathLike, domain: str) -> list[Volume]:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "index.json").read_text())
    return [read_volume(data_dir / domain / f"{vid}.mvol") for vid in index[domain]]


@dataclass
class SplitSpec:
    train_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)}")

    def to_json(self) -> str:
        return json.dumps({"train_ids": self.train_ids, "test_ids": self.test_ids,
                           "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(list(d["train_ids"]), list(d["test_ids"]), int(d["seed"]))


def make_splits(pool: Iterable[str], train_size: int, test_size: int, seed: int) -> SplitSpec:
    """Random disjoint train/test split.

    One permutation of the pool is drawn per seed; the test set is its
    first ``test_size`` ids and the train set the next ``train_size``. For a
    fixed seed the test set is therefore shared across train sizes and the
    train sets are nested.
    """
    pool = list(pool)
    if train_size < 1 or test_size < 1:
        raise ValueError("train_size and test_size must be positive")
    if len(pool) < train_size + test_size:
        raise ValueError(
            f"pool of {len(pool)} is too small for {train_size} train + {test_size} test"
        )
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5171])).permutation(len(pool))
    test = [pool[i] for i in order[:test_size]]
    train = [pool[i] for i in order[test_size:test_size + train_size]]
    return SplitSpec(train, test, int(seed))
