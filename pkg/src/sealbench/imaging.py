"""Raster images, file codecs and the seeded RNG contract.

Images are plain ``numpy`` arrays of shape ``(height, width, 3)``. The dtype is
the representation tag: ``uint8`` arrays hold 8-bit samples in [0, 255] and
``float64`` arrays hold normalized samples in [0, 1]. Pipelines work on the
float representation; quantization happens at file boundaries and JPEG steps.
"""

from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .exceptions import DecodeError, ParamError, SizeError

RNG_ALGORITHM = "numpy-pcg64-seedsequence"

_FORMATS = {"png": "PNG", "jpeg": "JPEG", "jpg": "JPEG", "bmp": "BMP"}


def make_rng(seed, *salt):
    """Return the generator for ``seed`` (optionally mixed with integer ``salt`` words).

    All stochastic operations draw exclusively from generators built here, so a
    recorded seed is enough to replay them.
    """
    words = [int(seed)] + [int(s) for s in salt]
    if any(w < 0 for w in words):
        raise ParamError("seeds must be non-negative integers")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def draw_seed(rng):
    """Draw a fresh 63-bit seed from ``rng``."""
    return int(rng.integers(0, 2**63, dtype=np.uint64))


def stable_hash64(text):
    """Platform-independent 63-bit hash of a string (used to salt seeds)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def check_image(image, name="image"):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise SizeError(f"{name} must have shape (height, width, 3), got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise SizeError(f"{name} is empty")
    if image.dtype != np.uint8 and not np.issubdtype(image.dtype, np.floating):
        raise ParamError(f"{name} must be uint8 or floating point, got {image.dtype}")
    return image


def to_float(image):
    """Real-valued [0, 1] float64 view of ``image``."""
    image = check_image(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64, copy=False)


def to_uint8(image):
    """Quantize to 8-bit with rounding and clipping."""
    image = check_image(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def load_image(path):
    """Decode a PNG, BMP or JPEG file into an RGB ``uint8`` array.

    Raises ``FileNotFoundError``/``OSError`` when the file cannot be read and
    ``DecodeError`` when it cannot be decoded.
    """
    path = Path(path)
    data = path.read_bytes()
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            if im.format not in ("PNG", "BMP", "JPEG", "MPO"):
                raise DecodeError(f"{path}: unsupported format {im.format}")
            im.load()
            rgb = im.convert("RGB")
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8).copy()


def encode_image(image, format="png", quality=None):
    """Encode ``image`` to bytes. ``quality`` applies to JPEG only and must lie in [1, 100]."""
    fmt = _FORMATS.get(format.lower())
    if fmt is None:
        raise ParamError(f"unsupported output format {format!r}")
    kwargs = {}
    if fmt == "JPEG":
        quality = 75 if quality is None else quality
        if not 1 <= int(quality) <= 100 or int(quality) != quality:
            raise ParamError(f"jpeg quality must be an integer in [1, 100], got {quality}")
        kwargs["quality"] = int(quality)
    elif fmt == "PNG":
        kwargs["compress_level"] = 6
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(image), mode="RGB").save(buf, format=fmt, **kwargs)
    return buf.getvalue()


def save_image(image, path, format="png", quality=None):
    path = Path(path)
    data = encode_image(image, format=format, quality=quality)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def jpeg_roundtrip(image, quality):
    """Encode to JPEG in memory and decode again; returns ``uint8``."""
    data = encode_image(image, format="jpeg", quality=quality)
    with PILImage.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def crop_center(image, w, h):
    """Centered ``w`` x ``h`` sub-image; offsets are ``floor((dim - target) / 2)``."""
    image = check_image(image)
    height, width = image.shape[:2]
    if w < 1 or h < 1 or w > width or h > height:
        raise SizeError(f"cannot crop {w}x{h} from {width}x{height}")
    top = (height - h) // 2
    left = (width - w) // 2
    return image[top : top + h, left : left + w].copy()


def crop_to_multiple(image, factor):
    """Center-crop so both dimensions are multiples of ``factor``."""
    image = check_image(image)
    height, width = image.shape[:2]
    w, h = width - width % factor, height - height % factor
    if w == 0 or h == 0:
        raise SizeError(f"image {width}x{height} is smaller than scale factor {factor}")
    if (w, h) == (width, height):
        return image
    return crop_center(image, w, h)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()
