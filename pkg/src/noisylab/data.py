"""Patch datasets: pairing, scene splits, the synthetic generator, file I/O.

The sample unit is a (C, 32, 32) patch of normalized raw intensities plus
scene metadata.  Pairs hold two independently noisy patches of one latent
signal; synthetic pairs retain the generating clean patch.

On-disk format ("NPDS", all integers little-endian):
    magic "NPDS" | version u32 |
    channels u8 | patch_h u16 | patch_w u16 | black f32 | white f32 |
    record count u64 |
    per record: camera_id (u32 len + utf-8) | iso u32 | scene_id u32 |
                illum u8 (0=normal, 1=low) | flags u8 (bit0: clean present) |
                tensors a, b[, clean] as raw little-endian float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

ISO_LEVELS = (100, 400, 800, 1600, 3200)
ILLUMINATIONS = ("normal", "low")
PATCH_SIZE = 32

NPDS_MAGIC = b"NPDS"
NPDS_VERSION = 1


@dataclass(frozen=True)
class SceneMeta:
    camera_id: str
    iso: int
    scene_id: int
    illumination: str = "normal"

    def __post_init__(self):
        if self.iso not in ISO_LEVELS:
            raise ValueError(f"iso {self.iso} not in allowed set {ISO_LEVELS}")
        if self.illumination not in ILLUMINATIONS:
            raise ValueError(f"illumination {self.illumination!r} not in {ILLUMINATIONS}")


@dataclass
class Patch:
    data: np.ndarray  # (C, H, W) float32
    meta: SceneMeta

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"patch data must be (C,H,W), got {self.data.shape}")


@dataclass
class NoisyPair:
    a: Patch
    b: Patch
    clean: Patch | None = None

    def __post_init__(self):
        if self.a.meta != self.b.meta:
            raise ValueError("paired patches must share metadata")
        if self.a.data.shape != self.b.data.shape:
            raise ShapeError("paired patches must share shape")
        if self.clean is not None and self.clean.meta != self.a.meta:
            raise ValueError("clean patch metadata must match the pair")

    @property
    def meta(self) -> SceneMeta:
        return self.a.meta


@dataclass
class DatasetManifest:
    version: int = NPDS_VERSION
    record_offsets: list[int] = field(default_factory=list)
    scene_split: dict[int, str] = field(default_factory=dict)  # scene_id -> train/test


@dataclass
class PatchDataset:
    channels: int
    patch_h: int
    patch_w: int
    black_level: float
    white_level: float
    pairs: list[NoisyPair]
    manifest: DatasetManifest = field(default_factory=DatasetManifest)

    def __len__(self):
        return len(self.pairs)

    def scene_ids(self) -> list[int]:
        return sorted({p.meta.scene_id for p in self.pairs})

    def has_clean(self) -> bool:
        return all(p.clean is not None for p in self.pairs)


# ---------------------------------------------------------------------------
# pairing and splitting
# ---------------------------------------------------------------------------

def extract_pairs(captures, meta: SceneMeta, patch: int = PATCH_SIZE) -> list[NoisyPair]:
    """Pair consecutive captures (1,2), (3,4), ... and tile each pair.

    Patches come from a non-overlapping `patch`-sized grid; border remainders
    are dropped.  Each capture is used at most once (an odd trailing capture
    is discarded).
    """
    captures = [np.asarray(c, dtype=np.float32) for c in captures]
    if len(captures) < 2:
        raise ValueError(f"need at least 2 captures to form pairs, got {len(captures)}")
    shape = captures[0].shape
    if any(c.shape != shape for c in captures):
        raise ShapeError("all captures of a scene must share dimensions")
    if len(shape) != 3:
        raise ShapeError(f"captures must be (C,H,W), got {shape}")
    _, h, w = shape
    pairs = []
    for i in range(0, len(captures) - 1, 2):
        ca, cb = captures[i], captures[i + 1]
        for y in range(0, h - patch + 1, patch):
            for x in range(0, w - patch + 1, patch):
                pa = Patch(ca[:, y:y + patch, x:x + patch], meta)
                pb = Patch(cb[:, y:y + patch, x:x + patch], meta)
                pairs.append(NoisyPair(pa, pb))
    return pairs


def split_dataset(dataset: PatchDataset, train_fraction: float = 0.7,
                  seed: int = 0) -> tuple[list[NoisyPair], list[NoisyPair]]:
    """Scene-level train/test partition; a scene never straddles the split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    scenes = dataset.scene_ids()
    if len(scenes) < 2:
        raise ValueError("cannot split by scene: dataset has fewer than 2 scenes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5111])))
    order = list(rng.permutation(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    n_train = min(max(n_train, 1), len(scenes) - 1)
    train_scenes = set(order[:n_train])
    dataset.manifest.scene_split = {
        s: ("train" if s in train_scenes else "test") for s in scenes}
    train = [p for p in dataset.pairs if p.meta.scene_id in train_scenes]
    test = [p for p in dataset.pairs if p.meta.scene_id not in train_scenes]
    return train, test


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear interpolation of a (k+1, k+1) grid onto size x size."""
    k = grid.shape[0] - 1
    if k == 0:
        return np.full((size, size), grid[0, 0], dtype=np.float64)
    t = np.linspace(0.0, k, size)
    i0 = np.minimum(t.astype(int), k - 1)
    f = t - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return out


def smooth_clean_patches(n: int, channels: int, rng: np.random.Generator,
                         size: int = PATCH_SIZE) -> np.ndarray:
    """Random smooth intensity fields in [0,1], shaped (n, channels, size, size).

    Each channel interpolates a coarse random grid (1x1 up to 5x5 control
    points).  A quarter of the patches are dark and a quarter bright, so the
    intensity marginal covers the whole range; otherwise bilinear blending
    would concentrate values mid-range and leave the variance-vs-intensity
    relationship poorly identified near the endpoints.
    """
    out = np.empty((n, channels, size, size), dtype=np.float32)
    ks = rng.integers(0, 5, size=(n, channels))
    ranges = rng.uniform(0.0, 1.0, size=n)
    for i in range(n):
        if ranges[i] < 0.25:
            lo, hi = 0.0, 0.25
        elif ranges[i] < 0.5:
            lo, hi = 0.75, 1.0
        else:
            lo, hi = 0.0, 1.0
        for c in range(channels):
            k = int(ks[i, c])
            grid = rng.uniform(lo, hi, size=(k + 1, k + 1))
            out[i, c] = _bilinear_upsample(grid, size)
    return out


def synth_hgn_dataset(beta1: float, beta2: float, camera: str, iso: int,
                      n_pairs: int, seed: int, channels: int = 1,
                      patch: int = PATCH_SIZE, clean_source=None,
                      pairs_per_scene: int = 100,
                      illumination: str = "normal") -> PatchDataset:
    """Noisy pairs under per-pixel variance beta1*clean + beta2, clean kept.

    Noise fields of a pair are independent draws; noisy values are NOT
    clipped, since clipping would bias recovery of the variance parameters.
    Scene ids group `pairs_per_scene` consecutive pairs so scene-level
    splitting stays meaningful.
    """
    if beta1 < 0:
        raise ValueError(f"beta1 must be >= 0, got {beta1}")
    if beta2 <= 0:
        raise ValueError(f"beta2 must be > 0, got {beta2}")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    if clean_source is None:
        clean = smooth_clean_patches(n_pairs, channels, rng, patch)
    else:
        clean = np.asarray(clean_source, dtype=np.float32)
        if clean.shape != (n_pairs, channels, patch, patch):
            raise ShapeError(
                f"clean_source shape {clean.shape} != {(n_pairs, channels, patch, patch)}")
        if clean.min() < 0.0 or clean.max() > 1.0:
            raise ValueError("clean intensities must lie in [0,1]")
    std = np.sqrt(beta1 * clean + beta2)
    noisy_a = clean + std * rng.standard_normal(clean.shape).astype(np.float32)
    noisy_b = clean + std * rng.standard_normal(clean.shape).astype(np.float32)

    pairs = []
    for i in range(n_pairs):
        meta = SceneMeta(camera, iso, scene_id=i // pairs_per_scene,
                         illumination=illumination)
        pairs.append(NoisyPair(
            Patch(noisy_a[i], meta), Patch(noisy_b[i], meta),
            clean=Patch(clean[i], meta)))
    return PatchDataset(channels, patch, patch, 0.0, 1.0, pairs)


# ---------------------------------------------------------------------------
# real-data ingestion helpers
# ---------------------------------------------------------------------------

def normalize_raw(values: np.ndarray, black_level: float, white_level: float) -> np.ndarray:
    if white_level <= black_level:
        raise ValueError("white_level must exceed black_level")
    return (np.asarray(values, dtype=np.float32) - black_level) / (white_level - black_level)


def pack_bayer(mosaic: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Split a (H, W) Bayer mosaic into 4 half-resolution planes (R,G1,G2,B)."""
    if mosaic.ndim != 2 or mosaic.shape[0] % 2 or mosaic.shape[1] % 2:
        raise ShapeError(f"mosaic must be 2-D with even extents, got {mosaic.shape}")
    if pattern != "RGGB":
        raise ValueError(f"unsupported Bayer pattern {pattern!r}")
    return np.stack([
        mosaic[0::2, 0::2], mosaic[0::2, 1::2],
        mosaic[1::2, 0::2], mosaic[1::2, 1::2],
    ]).astype(np.float32)


def ingest_scene(mosaics, meta: SceneMeta, black_level: float, white_level: float,
                 patch: int = PATCH_SIZE) -> tuple[list[NoisyPair], float]:
    """Normalize, clamp to [0,1], pack and pair raw Bayer captures.

    Returns the pairs plus the fraction of samples that had to be clamped,
    so callers can record that clipping happened.
    """
    planes = []
    clipped = 0
    total = 0
    for m in mosaics:
        x = normalize_raw(m, black_level, white_level)
        clipped += int(np.count_nonzero((x < 0.0) | (x > 1.0)))
        total += x.size
        planes.append(pack_bayer(np.clip(x, 0.0, 1.0)))
    pairs = extract_pairs(planes, meta, patch)
    return pairs, clipped / max(total, 1)


# ---------------------------------------------------------------------------
# NPDS file I/O
# ---------------------------------------------------------------------------

def write_dataset(path, dataset: PatchDataset) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(NPDS_MAGIC)
        f.write(struct.pack("<I", NPDS_VERSION))
        f.write(struct.pack("<BHHff", dataset.channels, dataset.patch_h,
                            dataset.patch_w, dataset.black_level, dataset.white_level))
        f.write(struct.pack("<Q", len(dataset.pairs)))
        for pair in dataset.pairs:
            meta = pair.meta
            cam = meta.camera_id.encode("utf-8")
            f.write(struct.pack("<I", len(cam)))
            f.write(cam)
            f.write(struct.pack("<IIB", meta.iso, meta.scene_id,
                                ILLUMINATIONS.index(meta.illumination)))
            flags = 1 if pair.clean is not None else 0
            f.write(struct.pack("<B", flags))
            for tensor in (pair.a.data, pair.b.data) + (
                    (pair.clean.data,) if pair.clean is not None else ()):
                f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_dataset(path) -> PatchDataset:
    path = Path(path)
    with open(path, "rb") as f:
        def need(n, what):
            buf = f.read(n)
            if len(buf) != n:
                raise FormatError(f"{path}: truncated while reading {what}")
            return buf

        if need(4, "magic") != NPDS_MAGIC:
            raise FormatError(f"{path}: bad magic, not an NPDS dataset")
        (version,) = struct.unpack("<I", need(4, "version"))
        if version != NPDS_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        channels, ph, pw, black, white = struct.unpack("<BHHff", need(13, "header"))
        (count,) = struct.unpack("<Q", need(8, "record count"))
        tensor_bytes = 4 * channels * ph * pw

        pairs = []
        offsets = []
        for i in range(count):
            offsets.append(f.tell())
            (clen,) = struct.unpack("<I", need(4, "camera id length"))
            cam = need(clen, "camera id").decode("utf-8")
            iso, scene_id, illum = struct.unpack("<IIB", need(9, "scene meta"))
            (flags,) = struct.unpack("<B", need(1, "flags"))
            if illum >= len(ILLUMINATIONS):
                raise FormatError(f"{path}: record {i} has bad illumination tag {illum}")
            try:
                meta = SceneMeta(cam, iso, scene_id, ILLUMINATIONS[illum])
            except ValueError as e:
                raise FormatError(f"{path}: record {i}: {e}") from e

            def read_tensor(label):
                raw = need(tensor_bytes, f"{label} tensor of record {i}")
                return np.frombuffer(raw, dtype="<f4").reshape(channels, ph, pw).copy()

            a = Patch(read_tensor("a"), meta)
            b = Patch(read_tensor("b"), meta)
            clean = Patch(read_tensor("clean"), meta) if flags & 1 else None
            pairs.append(NoisyPair(a, b, clean))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} records")

    manifest = DatasetManifest(version=version, record_offsets=offsets)
    return PatchDataset(channels, ph, pw, black, white, pairs, manifest)
