"""Images, masks, synthetic data and dataset manifests.

On disk a dataset is a directory with ``images/`` and ``masks/`` holding
files with matching stems, plus ``manifest.json`` recording the pairs and
the train/test split.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .weightfile import atomic_write

MAX_DIM = 1 << 15


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class CorruptHeaderError(ImageFormatError):
    pass


class DimensionError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


@dataclass
class SamplePair:
    id: str
    image: np.ndarray  # (h, w) float32 in [0, 1]
    mask: np.ndarray  # (h, w) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# --- netpbm ---------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise UnsupportedFormatError(f"unsupported magic {buf[:2]!r}, expected {magic!r}")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if not m or not m.group(1).isdigit():
            raise CorruptHeaderError("corrupt netpbm header")
        vals.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise CorruptHeaderError("corrupt netpbm header: missing separator before pixel data")
    w, h, maxval = vals
    if not (1 <= w <= MAX_DIM and 1 <= h <= MAX_DIM):
        raise DimensionError(f"image dimensions {w}x{h} out of range (1..{MAX_DIM})")
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit images (maxval 255) are supported, got {maxval}")
    return w, h, maxval, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Decode binary P5 bytes to a ``(h, w)`` uint8 array."""
    w, h, _, off = _parse_header(buf, b"P5")
    body = buf[off:off + w * h]
    if len(body) < w * h:
        raise TruncatedImageError(f"unexpected end of pixel data ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, _, off = _parse_header(buf, b"P6")
    body = buf[off:off + 3 * w * h]
    if len(body) < 3 * w * h:
        raise TruncatedImageError(f"unexpected end of pixel data ({len(body)} of {3 * w * h} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def read_gray8(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P5":
        return decode_pgm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:
            raise UnsupportedFormatError(f"{path}: PNG support needs Pillow") from None
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P"):
                raise UnsupportedFormatError(f"{path}: PNG must be 8-bit grayscale, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise UnsupportedFormatError(f"{path}: unsupported magic {buf[:2]!r}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image scaled into [0, 1] as float32."""
    return read_gray8(path).astype(np.float32) / np.float32(255)


def load_mask(path, polarity: str = "white") -> np.ndarray:
    """Read a 0/255 mask. ``polarity="black"`` treats dark pixels as fire."""
    px = read_gray8(path)
    fire = px >= 128
    if polarity == "black":
        fire = ~fire
    return fire.astype(np.uint8)


def save_mask(path, mask) -> None:
    atomic_write(path, encode_pgm(np.asarray(mask, dtype=np.uint8) * 255))


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def overlay(image, mask, color=(255, 32, 0)) -> np.ndarray:
    g = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(g[..., None], 3, axis=2)
    rgb[mask_boundary(mask)] = color
    return rgb


def save_overlay(path, image, mask) -> None:
    atomic_write(path, encode_ppm(overlay(image, mask)))


# --- resizing -------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image, width: int, height: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (corners not aligned)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or 0 in img.shape or width < 1 or height < 1:
        raise ValueError(f"cannot resize image of shape {img.shape} to {width}x{height}")
    y0, y1, fy = _axis_weights(img.shape[0], height)
    x0, x1, fx = _axis_weights(img.shape[1], width)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return out.astype(np.float32)


def resize_nearest(mask, width: int, height: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or 0 in m.shape or width < 1 or height < 1:
        raise ValueError(f"cannot resize mask of shape {m.shape} to {width}x{height}")
    ys = np.minimum(((np.arange(height) + 0.5) * m.shape[0] / height).astype(np.int64), m.shape[0] - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * m.shape[1] / width).astype(np.int64), m.shape[1] - 1)
    return m[ys][:, xs].copy()


# --- synthetic data -------------------------------------------------------

# Generator constants (documented in README).
BLOBS = (1, 3)
BLOB_SIGMA = (0.07, 0.14)  # fraction of the image side
BLOB_PEAK = (0.6, 0.75)
BACKGROUND = (0.05, 0.25)
NOISE_STD = 0.02
EDGE_GAIN = 12.0  # steepness of the flame opacity at the mask boundary


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 4.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + ph)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-9)
    lo, hi = BACKGROUND
    return lo + (hi - lo) * tex


def synth_sample(rng: np.random.Generator, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """One image/mask pair of bright flame-like blobs on a dark texture.

    Each blob is an anisotropic Gaussian ``g``; its opacity is a logistic
    function of ``g - 0.5`` so that the labelled region ``g >= 0.5`` is
    exactly where the blob is at least half opaque.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = _background(rng, height, width)
    mask = np.zeros((height, width), dtype=bool)
    side = min(width, height)
    for _ in range(int(rng.integers(BLOBS[0], BLOBS[1] + 1))):
        sy, sx = rng.uniform(*BLOB_SIGMA, 2) * side
        theta = rng.uniform(0, np.pi)
        cy = rng.uniform(0.15, 0.85) * height
        cx = rng.uniform(0.15, 0.85) * width
        peak = rng.uniform(*BLOB_PEAK)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        blob = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        alpha = 1.0 / (1.0 + np.exp(-EDGE_GAIN * (blob - 0.5)))
        img = img * (1 - alpha) + peak * alpha
        mask |= blob >= 0.5
    img += rng.normal(0.0, NOISE_STD, img.shape)
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.uint8)


def quantize_u8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, np.float64) * 255), 0, 255).astype(np.uint8)


def synth_dataset(seed: int, n: int, width: int = 320, height: int = 240) -> list[SamplePair]:
    """Deterministic synthetic fire dataset.

    Images are rounded to 8 bits so that a dataset written to PGM and read
    back is identical to the in-memory one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, mask = synth_sample(rng, width, height)
        img = quantize_u8(img).astype(np.float32) / np.float32(255)
        out.append(SamplePair(f"synth_{i:05d}", img, mask))
    return out


# --- manifests ------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    items: list[dict]  # {"id", "image", "mask"}
    split: dict[str, str] = field(default_factory=dict)  # id -> "train" | "test"
    polarity: str = "white"

    def to_dict(self) -> dict:
        return {"items": self.items, "split": self.split, "polarity": self.polarity}

    def save(self) -> None:
        atomic_write(Path(self.root) / "manifest.json", json.dumps(self.to_dict(), indent=1).encode())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if path.exists():
            d = json.loads(path.read_text())
            m = cls(root, d["items"], d.get("split", {}), d.get("polarity", "white"))
        else:
            m = cls.scan(root)
        for it in m.items:
            for key in ("image", "mask"):
                if not (root / it[key]).exists():
                    raise FileNotFoundError(f"manifest references missing file {root / it[key]}")
        return m

    @classmethod
    def scan(cls, root, polarity: str = "white") -> "DatasetManifest":
        """Pair ``images/<stem>.*`` with ``masks/<stem>.*``."""
        root = Path(root)
        masks = {p.stem: p for p in sorted((root / "masks").glob("*")) if p.suffix.lower() in (".pgm", ".png")}
        items = []
        for p in sorted((root / "images").glob("*")):
            if p.suffix.lower() in (".pgm", ".png") and p.stem in masks:
                items.append({"id": p.stem, "image": str(p.relative_to(root)),
                              "mask": str(masks[p.stem].relative_to(root))})
        if not items:
            raise FileNotFoundError(f"no image/mask pairs under {root}")
        return cls(root, items, {}, polarity)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None or split == "all":
            return [it["id"] for it in self.items]
        if not self.split:
            raise ValueError("manifest has no split; run split_dataset first")
        return [it["id"] for it in self.items if self.split.get(it["id"]) == split]

    def samples(self, split: str | None = None, width: int | None = None,
                height: int | None = None) -> list[SamplePair]:
        wanted = set(self.ids(split))
        out = []
        for it in self.items:
            if it["id"] not in wanted:
                continue
            img = load_image(Path(self.root) / it["image"])
            mask = load_mask(Path(self.root) / it["mask"], self.polarity)
            if width and height and img.shape != (height, width):
                img = resize_bilinear(img, width, height)
                mask = resize_nearest(mask, width, height)
            out.append(SamplePair(it["id"], img, mask))
        return out


def split_ids(ids: list[str], fraction: float = 0.8, seed: int = 0) -> dict[str, str]:
    if not 0 < fraction < 1:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    if len(ids) < 2:
        raise ValueError("need at least 2 items to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(fraction * len(ids))), 1), len(ids) - 1)
    split = {}
    for rank, i in enumerate(order):
        split[ids[i]] = "train" if rank < n_train else "test"
    return split


def split_dataset(manifest: DatasetManifest, fraction: float = 0.8, seed: int = 0,
                  by: str = "image") -> DatasetManifest:
    """Seeded shuffle-and-partition stored in the manifest.

    ``by="scene"`` keeps all frames sharing an id prefix (text before the
    last ``_``) on the same side of the split.
    """
    ids = manifest.ids()
    if by == "scene":
        scenes = sorted({i.rsplit("_", 1)[0] for i in ids})
        if len(scenes) < 2:
            raise ValueError("need at least 2 scenes to split by scene")
        scene_split = split_ids(scenes, fraction, seed)
        manifest.split = {i: scene_split[i.rsplit("_", 1)[0]] for i in ids}
    else:
        manifest.split = split_ids(ids, fraction, seed)
    return manifest


def write_dataset(root, samples: list[SamplePair], fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    root = Path(root)
    items = []
    for s in samples:
        img_rel, mask_rel = f"images/{s.id}.pgm", f"masks/{s.id}.pgm"
        atomic_write(root / img_rel, encode_pgm(quantize_u8(s.image)))
        save_mask(root / mask_rel, s.mask)
        items.append({"id": s.id, "image": img_rel, "mask": mask_rel})
    m = split_dataset(DatasetManifest(root, items), fraction, seed)
    m.save()
    return m
