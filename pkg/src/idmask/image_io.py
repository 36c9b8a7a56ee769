"""File formats: 8-bit PNG for human-facing images, "IMSK" for float tensors.

PNG mapping is bit-exact both ways: writing stores ``rint(pixel * 255)``
(ties to even) clamped to {0..255}; reading maps byte ``b`` to ``b / 255``.
Only 8-bit grayscale ("L") and 8-bit RGB files are accepted.

The IMSK container is a lossless little-endian layout for a batch of
float64 tensors sharing one (H, W, C) shape:

    offset  size  field
    0       4     magic  b"IMSK"
    4       2     format version, u16  (currently 1)
    6       4     count, u32   (must be >= 1)
    10      4     height, u32
    14      4     width, u32
    18      4     channels, u32
    22      ...   count*height*width*channels float64 values, C order

Image batches and perturbation masks both travel in this container; the
container itself only requires finite values, uniform shape and a
nonempty batch. Unit-range validation belongs to image constructors.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .validation import as_pixel_array, check_image, freeze

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
TENSOR_MAGIC = b"IMSK"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


class ImageFileError(ValueError):
    """Base class for image/tensor file problems."""


class MalformedFileError(ImageFileError):
    """The file does not parse as the expected format."""


class UnsupportedFormatError(ImageFileError):
    """The file parses but uses an unsupported variant (e.g. bit depth)."""


class TensorFormatError(ImageFileError):
    """IMSK container violation: bad magic, version or truncation."""


def read_image_file(path):
    """Read an 8-bit grayscale or RGB PNG into a float64 image in [0, 1].

    Raises FileNotFoundError for a missing file, MalformedFileError when
    the PNG signature or structure is broken, and UnsupportedFormatError
    for valid PNGs outside the 8-bit L/RGB subset.
    """
    with open(path, "rb") as fh:
        head = fh.read(len(PNG_SIGNATURE))
    if head != PNG_SIGNATURE:
        raise MalformedFileError(f"{path}: not a PNG (bad signature)")
    try:
        with PILImage.open(path) as img:
            img.load()
            mode = img.mode
            if mode not in ("L", "RGB"):
                raise UnsupportedFormatError(
                    f"{path}: unsupported PNG variant {mode!r}; "
                    "only 8-bit grayscale or RGB is accepted"
                )
            raw = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise MalformedFileError(f"{path}: malformed PNG ({exc})") from exc
    except OSError as exc:
        raise MalformedFileError(f"{path}: truncated or corrupt PNG ({exc})") from exc
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return freeze(raw.astype(np.float64) / 255.0)


def write_image_file(image, path):
    """Write an image as an 8-bit PNG, quantizing with rint(pixel * 255)."""
    arr = check_image(image)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(data, mode="RGB")
    pil.save(path, format="PNG")


def quantize_unit(image):
    """The [0,1] image as it will read back after a PNG round-trip."""
    arr = check_image(image)
    return np.clip(np.rint(arr * 255.0), 0, 255) / 255.0


def write_tensor_file(batch, path):
    """Write a batch of float64 tensors to an IMSK file (see module doc)."""
    arr = as_pixel_array(batch, "batch")
    if arr.ndim != 4:
        raise ValueError(f"batch must have shape (N, H, W, C), got {arr.shape}")
    n, h, w, c = arr.shape
    if n == 0:
        raise ValueError("nonempty required: refusing to write an empty batch")
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, n, h, w, c)
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor_file(path):
    """Read an IMSK file back into an (N, H, W, C) float64 array.

    Exact inverse of write_tensor_file: the payload bytes are reinterpreted,
    not re-encoded, so the round-trip is bitwise lossless.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, version, n, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise TensorFormatError(
            f"{path}: version mismatch (file {version}, reader {TENSOR_VERSION})"
        )
    if n == 0:
        raise TensorFormatError(f"{path}: nonempty required (count is 0)")
    expected = n * h * w * c * 8
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    arr = np.frombuffer(payload, dtype="<f8").reshape(n, h, w, c)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: non-finite values in payload")
    return freeze(arr.astype(np.float64))
