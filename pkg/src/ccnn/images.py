"""Binary PPM (P6) reading/writing and the resampling used everywhere else."""

import numpy as np
from PIL import Image


class PPMError(ValueError):
    pass


class NotP6(PPMError):
    pass


class UnsupportedMaxval(PPMError):
    pass


class TruncatedPPM(PPMError):
    pass


def to_uint8(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def ppm_bytes(image):
    image = to_uint8(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def ppm_write(image, path):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def parse_ppm(data):
    if data[:2] != b"P6":
        raise NotP6(f"not a binary PPM (magic {data[:2]!r})")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise TruncatedPPM("truncated or malformed PPM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedPPM("truncated PPM header")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} is not supported (only 255)")
    n = w * h * 3
    if len(data) - pos < n:
        raise TruncatedPPM(f"PPM pixel data truncated: {len(data) - pos} of {n} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def ppm_read(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def resample(image, out_w, out_h, box=None):
    """Antialiased bilinear resampling of a uint8 RGB image (or a region of it)."""
    im = Image.fromarray(to_uint8(image))
    return np.asarray(im.resize((int(out_w), int(out_h)), Image.BILINEAR, box=box))


def crop_patch(image, x, y, size, patch_size=64):
    """Square region ``(x, y, size)`` resampled to ``patch_size`` and scaled to [0, 1]."""
    region = (float(x), float(y), float(x + size), float(y + size))
    return resample(image, patch_size, patch_size, region).astype(np.float32) / 255.0
