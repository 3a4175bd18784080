"""Linear RGB images and the file formats around them (PFM, Radiance HDR, PNG, PPM)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InputError


@dataclass(eq=False)
class Image:
    """Linear radiance, (height, width, 3) float32, row 0 at the top."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InputError(f"expected (H, W, 3) pixels, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InputError("image contains non-finite pixels")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, value=0.0) -> Image:
        return cls(np.broadcast_to(np.asarray(value, np.float32), (height, width, 3)).copy())


# ------------------------------------------------------------------------ PFM


def write_pfm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.float32)
    if px.ndim == 2:
        px = np.repeat(px[:, :, None], 3, axis=2)
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Returns (H, W, 3) float32, top row first."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dimensions {w}x{h}")
    scale = float(m.group(4))
    dt = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    need = w * h * channels * 4
    if len(body) < need:
        raise FormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(body[:need], dtype=dt).astype(np.float32).reshape(h, w, channels)[::-1]
    if channels == 1:
        px = np.repeat(px, 3, axis=2)
    return np.ascontiguousarray(px)


# ------------------------------------------------------------- Radiance HDR


def read_hdr(path) -> np.ndarray:
    """Radiance RGBE (flat or new-style RLE scanlines); (H, W, 3) float32."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    if not (raw.startswith(b"#?RADIANCE") or raw.startswith(b"#?RGBE")):
        raise FormatError(f"{path}: not a Radiance HDR file")
    end = raw.find(b"\n\n")
    if end < 0:
        raise FormatError(f"{path}: missing header terminator")
    pos = end + 2
    nl = raw.find(b"\n", pos)
    m = re.match(rb"-Y (\d+) \+X (\d+)", raw[pos:nl])
    if not m:
        raise FormatError(f"{path}: unsupported resolution line {raw[pos:nl]!r}")
    h, w = int(m.group(1)), int(m.group(2))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dimensions")
    data = np.frombuffer(raw, dtype=np.uint8, offset=nl + 1)
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    i = 0
    try:
        for y in range(h):
            if 8 <= w < 32768 and data[i] == 2 and data[i + 1] == 2 and data[i + 2] < 128:
                i += 4
                for c in range(4):
                    x = 0
                    while x < w:
                        n = int(data[i])
                        i += 1
                        if n > 128:
                            n -= 128
                            rgbe[y, x:x + n, c] = data[i]
                            i += 1
                        else:
                            rgbe[y, x:x + n, c] = data[i:i + n]
                            i += n
                        x += n
            else:
                rgbe[y] = data[i:i + 4 * w].reshape(w, 4)
                i += 4 * w
    except (IndexError, ValueError):
        raise FormatError(f"{path}: truncated pixel data") from None
    e = rgbe[:, :, 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return (rgbe[:, :, :3] * f[:, :, None]).astype(np.float32)


def write_hdr(path, pixels: np.ndarray) -> None:
    """Flat (non-RLE) RGBE writer."""
    px = np.asarray(pixels, dtype=np.float64)
    h, w = px.shape[:2]
    mx = px.max(axis=2)
    mant, ex = np.frexp(mx)
    scale = np.where(mx > 1e-32, mant * 256.0 / np.where(mx > 0, mx, 1), 0.0)
    rgbe = np.zeros((h, w, 4), dtype=np.uint8)
    rgbe[:, :, :3] = np.clip(px * scale[:, :, None], 0, 255).astype(np.uint8)
    rgbe[:, :, 3] = np.where(mx > 1e-32, ex + 128, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        fh.write(f"-Y {h} +X {w}\n".encode("ascii"))
        fh.write(rgbe.tobytes())


def load_envmap(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix in (".hdr", ".rgbe", ".pic"):
        return read_hdr(path)
    raise DataError(f"{path}: environment maps must be .pfm or .hdr")


# ------------------------------------------------------------------- display


def tonemap(pixels: np.ndarray, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    v = np.clip(exposure * np.asarray(pixels, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)
    return np.round(v * 255.0).astype(np.uint8)


def tonemap_write(image: Image, path, exposure: float = 1.0, gamma: float = 2.2) -> None:
    """PNG/PPM get the tone-mapped 8-bit image; .pfm gets the raw linear values."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".pfm":
            write_pfm(path, image.pixels)
            return
        ldr = tonemap(image.pixels, exposure, gamma)
        if suffix == ".ppm":
            with open(path, "wb") as fh:
                fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
                fh.write(ldr.tobytes())
        else:
            from PIL import Image as PILImage

            PILImage.fromarray(ldr, "RGB").save(path)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from None


def read_image(path) -> Image:
    """Load an image for comparison: PFM/HDR as linear, 8-bit formats as value/255."""
    suffix = Path(path).suffix.lower()
    if suffix in (".pfm", ".hdr"):
        return Image(load_envmap(path))
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            return Image(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
