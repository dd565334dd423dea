"""Image/mask I/O, patch extraction, resizing, synthetic data, CT preprocessing.

Images are numpy arrays: grayscale ``(H, W)`` or channeled ``(C, H, W)``;
masks are binary ``(H, W)``. Everything is pure given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import UsageError


class PgmParseError(ValueError):
    """Malformed PGM file; the message carries the byte offset."""


@dataclass
class MaskPair:
    """An intensity image with its binary ground-truth mask."""
    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim not in (2, 3):
            raise UsageError(f"{self.id}: image must be (H,W) or (C,H,W), got {self.image.shape}")
        if self.image.shape[-2:] != self.mask.shape:
            raise UsageError(
                f"{self.id}: image spatial size {self.image.shape[-2:]} != mask {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise UsageError(f"{self.id}: mask must contain only 0 and 1")


@dataclass
class PatchSet:
    patches: list[MaskPair]
    provenance: list[tuple[str, tuple[int, int]]]
    size: tuple[int, int]


def _crop(pair: MaskPair, top: int, left: int, h: int, w: int, idx: int) -> MaskPair:
    img = pair.image[..., top:top + h, left:left + w]
    return MaskPair(image=img.copy(), mask=pair.mask[top:top + h, left:left + w].copy(),
                    id=f"{pair.id}#p{idx:05d}")


def extract_patches(pairs: list[MaskPair], size: tuple[int, int], count: int,
                    seed: int) -> PatchSet:
    """Uniformly random in-bounds crops, images and masks cut congruently."""
    if count < 1:
        raise UsageError(f"patch count must be >= 1, got {count}")
    h, w = size
    for pair in pairs:
        ih, iw = pair.mask.shape
        if h > ih or w > iw:
            raise UsageError(f"patch size {h}x{w} exceeds image {ih}x{iw} (id {pair.id})")
    rng = np.random.default_rng(seed)
    patches, provenance = [], []
    for idx in range(count):
        pair = pairs[int(rng.integers(len(pairs)))]
        ih, iw = pair.mask.shape
        top = int(rng.integers(ih - h + 1))
        left = int(rng.integers(iw - w + 1))
        patches.append(_crop(pair, top, left, h, w, idx))
        provenance.append((pair.id, (top, left)))
    return PatchSet(patches=patches, provenance=provenance, size=(h, w))


def grid_patches(pairs: list[MaskPair], size: tuple[int, int], stride: int) -> PatchSet:
    """Deterministic tiling at a fixed stride (top-left corners on a grid)."""
    h, w = size
    patches, provenance = [], []
    idx = 0
    for pair in pairs:
        ih, iw = pair.mask.shape
        if h > ih or w > iw:
            raise UsageError(f"patch size {h}x{w} exceeds image {ih}x{iw} (id {pair.id})")
        for top in range(0, ih - h + 1, stride):
            for left in range(0, iw - w + 1, stride):
                patches.append(_crop(pair, top, left, h, w, idx))
                provenance.append((pair.id, (top, left)))
                idx += 1
    return PatchSet(patches=patches, provenance=provenance, size=(h, w))


# ---- resizing ----

def _source_coords(n_out: int, n_src: int) -> np.ndarray:
    # corner-aligned sampling: output 0 -> source 0, output n_out-1 -> source n_src-1
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_src - 1) / (n_out - 1))


def resize(image: np.ndarray, target: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize to (h, w): bilinear for intensities, nearest for masks.

    Sampling is corner-aligned, so resizing to the source size is the
    identity and nearest mode preserves binary values exactly.
    """
    if image.ndim == 3:
        return np.stack([resize(ch, target, mode) for ch in image])
    h_out, w_out = target
    if h_out < 1 or w_out < 1:
        raise UsageError(f"target size must be positive, got {target}")
    h_src, w_src = image.shape
    ys = _source_coords(h_out, h_src)
    xs = _source_coords(w_out, w_src)
    if mode == "nearest":
        yi = np.minimum(np.floor(ys + 0.5).astype(int), h_src - 1)
        xi = np.minimum(np.floor(xs + 0.5).astype(int), w_src - 1)
        return image[yi][:, xi].copy()
    if mode != "bilinear":
        raise UsageError(f"mode must be 'nearest' or 'bilinear', got {mode!r}")
    y0 = np.minimum(np.floor(ys).astype(int), h_src - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w_src - 1)
    y1 = np.minimum(y0 + 1, h_src - 1)
    x1 = np.minimum(x0 + 1, w_src - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


# ---- CT slice preprocessing (surrounding-tissue mask construction) ----

@dataclass
class SurroundingMask:
    mask: np.ndarray
    constant_input: bool = False


def _erode3(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1, constant_values=False)
    out = np.ones_like(m)
    for di in range(3):
        for dj in range(3):
            out &= p[di:di + m.shape[0], dj:dj + m.shape[1]]
    return out


def _dilate3(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1, constant_values=False)
    out = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            out |= p[di:di + m.shape[0], dj:dj + m.shape[1]]
    return out


def binary_opening3(m: np.ndarray) -> np.ndarray:
    """One erosion then one dilation with a 3x3 square element, zero border."""
    return _dilate3(_erode3(m.astype(bool)))


def lung_preprocess(x: np.ndarray, gt: np.ndarray) -> SurroundingMask:
    """Build the surrounding-tissue training mask from a CT slice and lung mask.

    Clamp intensities to [-512, 512], min-max normalize, binarize at 0.5,
    union with the ground truth, denoise with a 3x3 binary opening, then
    subtract the ground truth. The result never overlaps ``gt``.
    A constant slice normalizes to all zeros and sets ``constant_input``.
    """
    if x.shape != gt.shape:
        raise UsageError(f"slice shape {x.shape} != mask shape {gt.shape}")
    gtb = gt.astype(bool)
    clamped = np.clip(np.asarray(x, dtype=np.float64), -512.0, 512.0)
    lo, hi = clamped.min(), clamped.max()
    constant = hi == lo
    norm = np.zeros_like(clamped) if constant else (clamped - lo) / (hi - lo)
    binary = norm >= 0.5
    opened = binary_opening3(binary | gtb)
    surrounding = opened & ~gtb
    return SurroundingMask(mask=surrounding.astype(np.uint8), constant_input=constant)


def lung_region_from_surrounding(surrounding: np.ndarray) -> np.ndarray:
    """Recover the enclosed region: holes of the surrounding mask.

    Flood-fills the complement from the border (4-connectivity); whatever
    complement remains unreached is enclosed by tissue and is returned.
    """
    s = surrounding.astype(bool)
    outside = np.zeros_like(s)
    comp = ~s
    outside[0, :] = comp[0, :]
    outside[-1, :] = comp[-1, :]
    outside[:, 0] = comp[:, 0]
    outside[:, -1] = comp[:, -1]
    while True:
        grown = outside.copy()
        grown[1:, :] |= outside[:-1, :]
        grown[:-1, :] |= outside[1:, :]
        grown[:, 1:] |= outside[:, :-1]
        grown[:, :-1] |= outside[:, 1:]
        grown &= comp
        if (grown == outside).all():
            break
        outside = grown
    return (comp & ~outside).astype(np.uint8)


# ---- synthetic datasets ----

def synth_dataset(kind: str, n: int, size, seed: int) -> list[MaskPair]:
    """Deterministic stand-in datasets: filled discs or thin smooth vessels."""
    if n < 1:
        raise UsageError(f"dataset size must be >= 1, got {n}")
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    maker = {"discs": _make_disc, "vessels": _make_vessels}.get(kind)
    if maker is None:
        raise UsageError(f"unknown synthetic kind {kind!r} (want discs or vessels)")
    return [maker(rng, h, w, f"{kind}-{seed}-{i:03d}") for i in range(n)]


def _make_disc(rng: np.random.Generator, h: int, w: int, name: str) -> MaskPair:
    r = rng.uniform(0.15, 0.3) * min(h, w)
    cy = rng.uniform(r + 1, h - r - 1)
    cx = rng.uniform(r + 1, w - r - 1)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    mask = (dist <= r).astype(np.uint8)
    bg = rng.uniform(0.05, 0.2)
    fg = rng.uniform(0.75, 0.95)
    coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)  # 1 px anti-alias ramp
    img = bg + (fg - bg) * coverage + rng.normal(0.0, 0.02, (h, w))
    return MaskPair(image=np.clip(img, 0.0, 1.0), mask=mask, id=name)


def _make_vessels(rng: np.random.Generator, h: int, w: int, name: str) -> MaskPair:
    mask = np.zeros((h, w), dtype=bool)
    coverage = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 3))):
        width = rng.uniform(1.0, 3.0)
        y0, y1 = rng.uniform(0, h - 1, 2)
        amp = rng.uniform(0.05, 0.2) * h
        k = rng.uniform(1.0, 2.5)
        phase = rng.uniform(0, 2 * math.pi)
        t = np.linspace(0.0, 1.0, 4 * max(h, w))
        py = y0 + (y1 - y0) * t + amp * np.sin(math.pi * k * t + phase)
        px = (w - 1) * t
        keep = (py >= 0) & (py <= h - 1)
        dist = np.full((h, w), np.inf)
        for cy, cx in zip(py[keep], px[keep]):
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            np.minimum(dist, d, out=dist)
        mask |= dist <= width / 2
        np.maximum(coverage, np.clip(width / 2 + 0.5 - dist, 0.0, 1.0), out=coverage)
    bg = rng.uniform(0.05, 0.15)
    fg = rng.uniform(0.7, 0.9)
    img = bg + (fg - bg) * coverage + rng.normal(0.0, 0.02, (h, w))
    return MaskPair(image=np.clip(img, 0.0, 1.0), mask=mask.astype(np.uint8), id=name)


# ---- PGM (P5) image files ----

def save_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; float images in [0,1] are quantized to 0..255."""
    if image.dtype.kind == "f":
        data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    else:
        data = image.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            if blob[pos:pos + 1].isspace():
                pos += 1
            elif blob[pos:pos + 1] == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl < 0 else nl + 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmParseError(f"{path}: unexpected end of header at byte {start}")
        return blob[start:pos]

    magic = token()
    if magic != b"P5":
        raise PgmParseError(f"{path}: expected P5 magic, found {magic!r} at byte 0")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise PgmParseError(f"{path}: non-numeric header field near byte {pos}: {e}") from None
    if maxval != 255:
        raise PgmParseError(f"{path}: maximum gray value must be 255, found {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:pos + w * h]
    if len(payload) != w * h:
        raise PgmParseError(
            f"{path}: payload truncated at byte {pos + len(payload)} (expected {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_mask_pgm(path, mask: np.ndarray) -> None:
    save_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def load_mask_pgm(path) -> np.ndarray:
    return (load_pgm(path) >= 128).astype(np.uint8)


# ---- manifests and model-ready batches ----

@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    split: str


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e.image_path} {e.mask_path} {e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise UsageError(f"{path}:{line_no}: expected 'image mask split', got {line!r}")
            entries.append(ManifestEntry(*parts))
    return entries


def load_manifest_pairs(path, split: str | None = None) -> list[MaskPair]:
    base = Path(path).parent
    pairs = []
    for e in read_manifest(path):
        if split is not None and e.split != split:
            continue
        img = load_pgm(base / e.image_path).astype(np.float64) / 255.0
        mask = load_mask_pgm(base / e.mask_path)
        pairs.append(MaskPair(image=img, mask=mask, id=e.image_path))
    return pairs


@dataclass
class SampleSet:
    """Model-ready stacked arrays: images (N,C,H,W), masks (N,1,H,W)."""
    images: np.ndarray
    masks: np.ndarray
    ids: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return self.images.shape[0]


def to_sample_set(pairs: list[MaskPair], dtype=np.float64) -> SampleSet:
    if not pairs:
        raise UsageError("cannot build a sample set from zero pairs")
    images = []
    for p in pairs:
        img = p.image if p.image.ndim == 3 else p.image[None]
        images.append(img.astype(dtype))
    masks = [p.mask[None].astype(dtype) for p in pairs]
    return SampleSet(images=np.stack(images), masks=np.stack(masks),
                     ids=tuple(p.id for p in pairs))
