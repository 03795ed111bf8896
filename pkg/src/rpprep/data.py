"""Image I/O (binary PPM/PGM), patch sampling and texture-based curation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
JND_SIGMA_HALF = 0.04


class ImageFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# -- PPM / PGM ------------------------------------------------------------

def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", pos)
    return buf[start:pos], start, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Parse binary P5/P6 with maxval 255 into a (C, H, W) float array in [0, 1]."""
    if buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {buf[:2]!r}", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed {name} {tok!r}", start)
        fields.append((int(tok), start))
    (w, _), (h, _), (maxval, mstart) = fields
    if w == 0 or h == 0:
        raise ImageFormatError("zero image dimension", fields[0][1])
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", mstart)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise ImageFormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return px.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_pnm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + px.tobytes()


def load_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def save_image(image, path):
    Path(path).write_bytes(encode_pnm(image))


def quantize8(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255) / 255.0


def list_images(directory):
    exts = {".ppm", ".pgm", ".pnm"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)


# -- patches and curation ---------------------------------------------------

@dataclass
class PatchRecord:
    source: str
    x: int
    y: int
    size: int
    jnd: float | None = None

    def crop(self, image):
        return image[:, self.y:self.y + self.size, self.x:self.x + self.size]


def extract_patches(image, size, count, seed, source="") -> list[PatchRecord]:
    """Uniformly random square patches, reproducible for a given seed."""
    _, h, w = np.shape(image)
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than patch size {size}")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - size + 1, size=count)
    xs = rng.integers(0, w - size + 1, size=count)
    return [PatchRecord(source, int(x), int(y), size) for x, y in zip(xs, ys)]


def jnd_proxy_score(patch) -> float:
    """Texture-masking score in [0, 1): mean over 8x8 blocks of sigma / (sigma + 0.04).

    Sigma is the population standard deviation of luma in each block.
    """
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    luma = np.tensordot(LUMA, p, axes=1) if p.shape[0] == 3 else p[0]
    h, w = luma.shape
    if h < 8 or w < 8:
        raise ValueError("patch must be at least 8x8")
    hb, wb = h // 8, w // 8
    blocks = luma[:hb * 8, :wb * 8].reshape(hb, 8, wb, 8)
    # Referencing each block to its first pixel makes flat blocks exactly zero.
    blocks = blocks - blocks[:, :1, :, :1]
    sigma = blocks.std(axis=(1, 3))
    return float(np.mean(sigma / (sigma + JND_SIGMA_HALF)))


def score_records(records, images):
    """Fill ``jnd`` for each record; ``images`` maps source id to image array."""
    for r in records:
        r.jnd = jnd_proxy_score(r.crop(images[r.source]))
    return records


def curate(records, threshold=0.8):
    return [r for r in records if r.jnd is not None and r.jnd > threshold]


def write_manifest(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=False) + "\n")


def read_manifest(path) -> list[PatchRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(PatchRecord(**json.loads(line)))
    return out


def load_patches(records, root=None) -> np.ndarray:
    cache = {}
    out = []
    for r in records:
        src = r.source if root is None or os.path.isabs(r.source) else os.path.join(root, r.source)
        if src not in cache:
            cache[src] = load_image(src)
        out.append(r.crop(cache[src]))
    return np.stack(out)


# -- procedural test imagery ------------------------------------------------

def _filtered_noise(rng, h, w, beta=None, blur=None):
    """Unit-range noise field, shaped either by a 1/f**beta spectrum or a Gaussian blur."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    if beta is not None:
        f[0, 0] = 1.0
        gain = f ** -beta
    else:
        gain = np.exp(-0.5 * (2 * np.pi * blur * f) ** 2)
    spec = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) * gain
    spec[0, 0] = 0.0
    field = np.fft.irfft2(spec, s=(h, w))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def _contrast_pair(rng):
    """A dark and a bright colour, so the pair differs strongly in luma."""
    dark = rng.uniform(0.0, 0.35, 3)
    bright = rng.uniform(0.6, 1.0, 3)
    return (dark, bright) if rng.random() < 0.5 else (bright, dark)


def _texture_mix(rng, h, w, yy, xx):
    kind = rng.integers(0, 4)
    if kind == 0:
        f = rng.uniform(0.1, 0.35)
        th = rng.uniform(0, np.pi)
        warp = 4.0 * (_filtered_noise(rng, h, w, beta=2.0) - 0.5)
        return 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + warp)
    if kind == 1:
        band = _filtered_noise(rng, h, w, blur=rng.uniform(0.8, 2.5))
        return (band > np.median(band)).astype(np.float64)
    if kind == 2:
        period = rng.integers(3, 9)
        return (((yy // period) + (xx // period)) % 2).astype(np.float64)
    band = _filtered_noise(rng, h, w, blur=rng.uniform(0.6, 1.5))
    return np.clip((band - band.mean()) * 4.0 + 0.5, 0, 1)


def synthetic_image(rng, height=256, width=256, texture_prob=0.7):
    """A procedural test picture: a Voronoi mosaic of smooth and strongly textured regions.

    Textured regions hold warped gratings, checkers, thresholded band-pass
    noise or saturated band-pass noise, each drawn between a dark and a
    bright colour. Smooth regions carry low-frequency shading. Mild sensor
    noise is added and the result is quantized to 8 bits.
    """
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    k = int(rng.integers(2, 6))
    seeds = rng.uniform(0, 1, (k, 2)) * [h, w]
    dist = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    label = np.argmin(dist, axis=0)
    img = np.zeros((3, h, w))
    for i in range(k):
        mask = label == i
        if rng.random() < texture_prob:
            c0, c1 = _contrast_pair(rng)
            mix = _texture_mix(rng, h, w, yy, xx)
        else:
            c0 = rng.uniform(0.1, 0.9, 3)
            c1 = np.clip(c0 + rng.uniform(-0.3, 0.3, 3), 0, 1)
            mix = _filtered_noise(rng, h, w, beta=2.5)
        layer = c0[:, None, None] * (1 - mix) + c1[:, None, None] * mix
        img[:, mask] = layer[:, mask]
    img += rng.normal(0, rng.uniform(0.003, 0.02), img.shape)
    return quantize8(np.clip(img, 0, 1))


def synthetic_patch_set(seed, n_images, image_size, patch_size, per_image, threshold=0.8):
    """Curated patches drawn from freshly generated synthetic images."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        img = synthetic_image(rng, image_size, image_size)
        recs = extract_patches(img, patch_size, per_image, int(rng.integers(1 << 31)), source=f"synthetic:{i}")
        for r in recs:
            r.jnd = jnd_proxy_score(r.crop(img))
        out.extend(r.crop(img) for r in curate(recs, threshold))
    return np.stack(out) if out else np.zeros((0, 3, patch_size, patch_size))
