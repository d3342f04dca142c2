"""Synthetic lesion corpus, raster I/O, normalization and clean/noisy splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import noisegen
from .errors import ContractError

@dataclass
class Sample:
    id: str
    image: np.ndarray                 # [3, H, W] float in [0, 1]
    clean_mask: np.ndarray            # [H, W] uint8
    noisy_mask: np.ndarray | None = None
    polygon: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.clean_mask.shape
        if self.image.shape[1:] != (h, w):
            raise ContractError(f"sample {self.id}: image {self.image.shape} and mask {self.clean_mask.shape} disagree")
        if self.noisy_mask is not None and self.noisy_mask.shape != (h, w):
            raise ContractError(f"sample {self.id}: noisy mask shape {self.noisy_mask.shape} != {(h, w)}")


# -- synthetic corpus ---------------------------------------------------------

AREA_BOUNDS = (0.05, 0.60)


def _smooth_field(rng, side, n_waves=4, scale=1.0):
    yy, xx = np.mgrid[0:side, 0:side] / side
    f = np.zeros((side, side))
    for _ in range(n_waves):
        kx, ky = rng.uniform(-3, 3, size=2)
        f += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
    return scale * f / n_waves


def _blob(rng, side):
    """Random ellipse with low-frequency radial perturbation; returns mask and inside-level field."""
    frac = rng.uniform(0.10, 0.40)
    aspect = rng.uniform(0.55, 1.0)
    area = frac * side * side
    a = math.sqrt(area / (math.pi * aspect))
    b = a * aspect
    phi = rng.uniform(0, math.pi)
    margin = max(a, b) * 1.1
    cy = rng.uniform(min(margin, side / 2), max(side - margin, side / 2))
    cx = rng.uniform(min(margin, side / 2), max(side - margin, side / 2))
    harmonics = [(k, rng.uniform(-0.12, 0.12), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4, 5)]

    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    rho = np.hypot(u / a, v / b)  # 1 on the unperturbed ellipse
    pert = 1.0 + sum(amp * np.cos(k * theta + ph) for k, amp, ph in harmonics)
    level = pert - rho           # > 0 inside
    return (level > 0).astype(np.uint8), level


def _is_single_component(mask) -> bool:
    _, n = ndimage.label(mask)
    return n == 1


def synth_sample(seed: int, index: int, side: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    lo, hi = AREA_BOUNDS
    for _ in range(100):
        mask, level = _blob(rng, side)
        frac = mask.mean()
        if lo <= frac <= hi and _is_single_component(mask):
            break
    else:  # pragma: no cover - rejection practically always succeeds
        raise RuntimeError(f"could not draw a valid blob for seed={seed} index={index}")

    # appearance varies widely between images: skin tone, lesion contrast and
    # hue, illumination ramp, vignetting and hair-like strokes
    skin = np.array([0.88, 0.68, 0.58]) * rng.uniform(0.55, 1.0) + rng.uniform(-0.05, 0.05, size=3)
    hue = rng.choice([np.array([0.55, 0.38, 0.30]), np.array([0.62, 0.32, 0.30]), np.array([0.42, 0.38, 0.42])])
    contrast = rng.uniform(0.25, 0.7)
    lesion = skin * (1 - contrast) + contrast * hue * skin.mean() + rng.uniform(-0.04, 0.04, size=3)
    alpha = 1.0 / (1.0 + np.exp(-level / 0.08))  # soft boundary
    bg_tex = _smooth_field(rng, side, scale=0.10)
    les_tex = _smooth_field(rng, side, scale=0.14)
    yy, xx = (np.mgrid[0:side, 0:side] + 0.5) / side - 0.5
    ramp_dir = rng.uniform(0, 2 * math.pi)
    light = rng.uniform(-0.12, 0.12) * (xx * math.cos(ramp_dir) + yy * math.sin(ramp_dir)) * 2
    light -= rng.uniform(0.0, 0.35) * np.clip(np.hypot(xx, yy) - 0.45, 0, None) / 0.26
    img = np.empty((3, side, side))
    for ch in range(3):
        img[ch] = (1 - alpha) * (skin[ch] + bg_tex) + alpha * (lesion[ch] + les_tex) + light
    for _ in range(int(rng.integers(0, 3))):
        r0, c0 = rng.uniform(0, side, size=2)
        ang = rng.uniform(0, math.pi)
        dist = np.abs((yy * side + side / 2 - r0) * math.cos(ang) - (xx * side + side / 2 - c0) * math.sin(ang))
        img *= 1 - 0.5 * np.exp(-(dist / 0.45) ** 2)[None]
    img += rng.normal(0, 0.03, size=img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255  # 8-bit quantized so disk round trips are lossless
    return Sample(id=f"s{seed:03d}_{index:05d}", image=img, clean_mask=mask)


def gen_synthetic(n: int, side: int = 24, seed: int = 0) -> list[Sample]:
    """``n`` lesion-like images with exact clean masks, deterministic per (seed, index)."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if side < 16:
        raise ContractError(f"side must be >= 16, got {side}")
    return [synth_sample(seed, i, side) for i in range(n)]


# -- raster I/O (binary PPM / PGM) -------------------------------------------

def _read_header(buf: bytes):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContractError("malformed raster header")
        fields.append(buf[start:pos])
    pos += 1  # single whitespace byte before the payload
    magic = fields[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise ContractError(f"unsupported raster magic '{magic}'")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ContractError("malformed raster header") from exc
    if maxval != 255:
        raise ContractError(f"only 8-bit rasters are supported (maxval {maxval})")
    return magic, w, h, pos


def load_raster(path) -> np.ndarray:
    """8-bit raster as uint8: ``[H, W]`` for PGM, ``[3, H, W]`` for PPM."""
    buf = Path(path).read_bytes()
    magic, w, h, pos = _read_header(buf)
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise ContractError(f"raster {path} truncated: need {need} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if channels == 1:
        return data.reshape(h, w).copy()
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def save_raster(arr, path) -> None:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ContractError(f"rasters are 8-bit; got dtype {a.dtype}")
    if a.ndim == 2:
        header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode()
        payload = a.tobytes()
    elif a.ndim == 3 and a.shape[0] == 3:
        header = f"P6\n{a.shape[2]} {a.shape[1]}\n255\n".encode()
        payload = a.transpose(1, 2, 0).tobytes()
    else:
        raise ContractError(f"cannot encode array of shape {a.shape} as a raster")
    Path(path).write_bytes(header + payload)


def load_mask(path) -> np.ndarray:
    raw = load_raster(path)
    if raw.ndim != 2:
        raise ContractError("mask must be single-channel")
    return (raw >= 128).astype(np.uint8)


def save_mask(mask, path) -> None:
    save_raster((np.asarray(mask) > 0).astype(np.uint8) * 255, path)


def load_image(path) -> np.ndarray:
    raw = load_raster(path)
    if raw.ndim != 3:
        raise ContractError("image must be a 3-channel raster")
    return raw.astype(np.float64) / 255.0


def save_image(img, path) -> None:
    save_raster(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), path)


# -- resizing and external corpora --------------------------------------------

def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's footprint."""
    m = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        a, b = i * step, (i + 1) * step
        for j in range(int(math.floor(a)), min(n_in, int(math.ceil(b)))):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / step


def resize_area(arr, side: int) -> np.ndarray:
    """Area-averaging resize of the last two axes to ``side x side``."""
    a = np.asarray(arr, dtype=np.float64)
    rows = _area_matrix(a.shape[-2], side)
    cols = _area_matrix(a.shape[-1], side)
    return rows @ a @ cols.T


def load_corpus(root, side: int | None = None) -> list[Sample]:
    """Read ``images/<id>.ppm`` + ``masks/<id>.pgm`` pairs, optionally resized."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} lacks images/ or masks/")
    manifest = root / "manifest.txt"
    if manifest.exists():
        ids = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    else:
        ids = sorted(p.stem for p in img_dir.glob("*.ppm"))
    samples = []
    for sid in ids:
        img = load_image(img_dir / f"{sid}.ppm")
        mask = load_mask(mask_dir / f"{sid}.pgm")
        if side is not None and (img.shape[1] != side or img.shape[2] != side):
            img = resize_area(img, side)
            mask = (resize_area(mask, side) >= 0.5).astype(np.uint8)
        samples.append(Sample(id=sid, image=img, clean_mask=mask))
    return samples


def save_corpus(samples, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(s.image, root / "images" / f"{s.id}.ppm")
        save_mask(s.clean_mask, root / "masks" / f"{s.id}.pgm")
    (root / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))


# -- normalization ----------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def from_images(cls, images) -> "NormStats":
        x = np.asarray(images, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        if np.any(std <= 0):
            raise ContractError(f"zero standard deviation in channel(s) {np.flatnonzero(std <= 0).tolist()}")
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def to_text(self) -> str:
        return " ".join(repr(v) for v in (*self.mean, *self.std)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NormStats":
        vals = [float(v) for v in text.split()]
        if len(vals) != 6:
            raise ContractError(f"norm stats need 6 numbers, got {len(vals)}")
        return cls(tuple(vals[:3]), tuple(vals[3:]))


def normalize(images, stats: NormStats) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    std = np.asarray(stats.std)
    if np.any(std <= 0):
        raise ContractError("zero standard deviation in norm stats")
    shape = (1, 3, 1, 1) if x.ndim == 4 else (3, 1, 1)
    return (x - np.asarray(stats.mean).reshape(shape)) / std.reshape(shape)


# -- splits -------------------------------------------------------------------

@dataclass
class DatasetSplit:
    clean: list[Sample]
    noisy: list[Sample]
    val: list[Sample]
    test: list[Sample]
    stats: NormStats
    policy: dict = field(default_factory=dict)

    def arrays(self, which: str, dtype=np.float64):
        """``(normalized images, training masks, clean masks)`` for one pool.

        Training masks are the noisy ones for the noisy pool and the clean
        ones everywhere else.
        """
        pool = getattr(self, which)
        if not pool:
            side = self.policy.get("side", 0)
            empty = np.zeros((0, side, side), dtype=np.uint8)
            return np.zeros((0, 3, side, side), dtype=dtype), empty, empty
        images = normalize(np.stack([s.image for s in pool]), self.stats).astype(dtype)
        clean = np.stack([s.clean_mask for s in pool]).astype(np.uint8)
        if which == "noisy":
            train = np.stack([s.noisy_mask for s in pool]).astype(np.uint8)
        else:
            train = clean
        return images, train, clean

    def manifest(self) -> str:
        lines = ["# split manifest"]
        for key in ("policy", "noise", "seed", "side"):
            if key in self.policy:
                lines.append(f"{key}: {self.policy[key]}")
        for name in ("clean", "noisy", "val", "test"):
            lines.append(f"{name}: " + ",".join(s.id for s in getattr(self, name)))
        lines.append("norm_stats: " + self.stats.to_text().strip())
        return "\n".join(lines) + "\n"


def make_splits(samples, K: int, M: int, noise_spec: noisegen.NoiseSpec, n_val: int = 0, n_test: int = 0,
                policy: str = "disjoint", seed: int = 0, importance: str = "angle_length") -> DatasetSplit:
    """Partition ``samples`` into clean / noisy / validation / test pools.

    ``disjoint`` draws every pool from separate samples.  ``subset`` makes the
    clean pool the first ``K`` images of the noisy pool (clean labels there,
    noisy labels in the noisy pool).  Normalization statistics come from the
    training images only.
    """
    if policy not in ("disjoint", "subset"):
        raise ContractError(f"unknown split policy '{policy}'")
    if min(K, M, n_val, n_test) < 0:
        raise ContractError("pool sizes must be nonnegative")
    if policy == "subset" and K > M:
        raise ContractError(f"subset policy needs K <= M, got K={K}, M={M}")
    train_n = K + M if policy == "disjoint" else M
    need = train_n + n_val + n_test
    if need > len(samples):
        raise ContractError(f"need {need} samples, have {len(samples)}")
    if M == 0 and K == 0:
        raise ContractError("split has no training samples")
    order = np.random.default_rng(seed).permutation(len(samples))
    picked = [samples[i] for i in order]
    if policy == "disjoint":
        clean_src, noisy_src = picked[:K], picked[K:K + M]
    else:
        noisy_src = picked[:M]
        clean_src = noisy_src[:K]
    rest = picked[train_n:]
    val, test = rest[:n_val], rest[n_val:n_val + n_test]

    noisy = []
    for s in noisy_src:
        nm, poly = noisegen.noisy_annotation(s.clean_mask, noise_spec, importance)
        noisy.append(Sample(s.id, s.image, s.clean_mask, nm, poly))
    clean = [Sample(s.id, s.image, s.clean_mask) for s in clean_src]
    train_images = np.stack([s.image for s in clean_src + noisy_src]) if policy == "disjoint" else \
        np.stack([s.image for s in noisy_src])
    stats = NormStats.from_images(train_images)
    side = samples[0].clean_mask.shape[0]
    record = {"policy": policy, "noise": str(noise_spec), "seed": seed, "side": side,
              "norm_stats_from": "training pool"}
    return DatasetSplit(clean, noisy, [Sample(s.id, s.image, s.clean_mask) for s in val],
                        [Sample(s.id, s.image, s.clean_mask) for s in test], stats, record)
