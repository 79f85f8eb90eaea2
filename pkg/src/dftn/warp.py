"""Deformation fields and differentiable bilinear warping.

A deformation field pairs every output pixel (x, y) with an offset
(dx, dy), stored channels-last as an array of shape (H, W, 2) with
field[..., 0] = dx and field[..., 1] = dy.  Warping is backward
mapping: the output at (x, y) samples the source at (x + dx, y + dy).
"""

import struct

import numpy as np
import torch

from .errors import CorruptionError, DataFormatError, ShapeError

_DFLD_MAGIC = b"DFLD"
_DFLD_VERSION = 1
_DFLD_HEADER = struct.Struct("<IIII")  # version, height, width, count


def identity_field(height, width):
    """All-zero field of shape (height, width, 2); warping with it is a no-op."""
    if height < 2 or width < 2:
        raise ShapeError(f"field dimensions must be at least 2x2, got {height}x{width}")
    return np.zeros((height, width, 2), dtype=np.float32)


def field_magnitude(field):
    """Per-pixel Euclidean length of the offsets, shape (..., H, W)."""
    if torch.is_tensor(field):
        return torch.sqrt(field[..., 0] ** 2 + field[..., 1] ** 2)
    field = np.asarray(field)
    return np.sqrt(field[..., 0] ** 2 + field[..., 1] ** 2)


def flip_field_horizontal(field):
    """Mirror a field for use with horizontally flipped frames.

    Columns are reversed and the dx channel is negated, so that
    warp(flip(s), flip_field_horizontal(d)) == flip(warp(s, d)).
    Applying it twice returns the original field.
    """
    if torch.is_tensor(field):
        if field.shape[-1] != 2:
            raise ShapeError(f"field must have a trailing axis of size 2, got {tuple(field.shape)}")
        out = torch.flip(field, dims=[-2]).clone()
        out[..., 0] = -out[..., 0]
        return out
    field = np.asarray(field)
    if field.shape[-1] != 2:
        raise ShapeError(f"field must have a trailing axis of size 2, got {field.shape}")
    out = field[..., ::-1, :].copy()
    out[..., 0] = -out[..., 0]
    return out


def _check_warp_shapes(source_shape, field_shape):
    if len(source_shape) < 2:
        raise ShapeError(f"source must be at least 2-d (H, W), got shape {tuple(source_shape)}")
    if len(field_shape) != len(source_shape) + 1 or field_shape[-1] != 2:
        raise ShapeError(
            f"field shape {tuple(field_shape)} does not match source shape {tuple(source_shape)}; "
            "expected source.shape + (2,)"
        )
    if tuple(field_shape[:-1]) != tuple(source_shape):
        raise ShapeError(
            f"field spatial dims {tuple(field_shape[:-1])} differ from source dims {tuple(source_shape)}"
        )
    h, w = source_shape[-2], source_shape[-1]
    if h < 2 or w < 2:
        raise ShapeError(f"source must be at least 2x2, got {h}x{w}")


def bilinear_warp(source, field):
    """Warp a source image by a deformation field with bilinear sampling.

    Output pixel (x, y) reads the source at (x + dx, y + dy); sample
    coordinates are clamped to the image rectangle, so out-of-range
    offsets replicate the border.  Fractional coordinates interpolate
    the four surrounding pixels, which keeps the result differentiable
    with respect to both the source intensities and the field.

    Args:
        source: array of shape (..., H, W); leading axes are batch axes.
        field: matching array of shape (..., H, W, 2), channels-last offsets.

    Returns:
        Warped image with the same shape and container type as source.
        Gradients flow through both arguments when called with tensors.
    """
    want_numpy = not torch.is_tensor(source)
    src = torch.from_numpy(np.ascontiguousarray(source)) if want_numpy else source
    fld = torch.from_numpy(np.ascontiguousarray(field)) if not torch.is_tensor(field) else field
    _check_warp_shapes(src.shape, fld.shape)

    src_dtype = src.dtype if src.is_floating_point() else torch.float32
    fld_dtype = fld.dtype if fld.is_floating_point() else torch.float32
    dtype = torch.promote_types(src_dtype, fld_dtype)
    src = src.to(dtype)
    fld = fld.to(dtype)

    lead = src.shape[:-2]
    h, w = src.shape[-2], src.shape[-1]
    src = src.reshape(-1, h, w)
    fld = fld.reshape(-1, h, w, 2)
    b = src.shape[0]

    grid_x = torch.arange(w, dtype=dtype, device=src.device).view(1, 1, w)
    grid_y = torch.arange(h, dtype=dtype, device=src.device).view(1, h, 1)
    sx = (grid_x + fld[..., 0]).clamp(0, w - 1)
    sy = (grid_y + fld[..., 1]).clamp(0, h - 1)

    x0 = sx.floor()
    y0 = sy.floor()
    wx = sx - x0
    wy = sy - y0
    x0 = x0.long().clamp(0, w - 1)
    y0 = y0.long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, h * w)

    def take(yi, xi):
        return flat.gather(1, (yi * w + xi).reshape(b, h * w)).reshape(b, h, w)

    v00 = take(y0, x0)
    v01 = take(y0, x1)
    v10 = take(y1, x0)
    v11 = take(y1, x1)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)
    out = out.reshape(*lead, h, w)
    return out.numpy() if want_numpy else out


def photometric_l1(warped, target):
    """Mean absolute intensity difference over all pixels (and batch axes)."""
    if torch.is_tensor(warped) or torch.is_tensor(target):
        warped = warped if torch.is_tensor(warped) else torch.from_numpy(np.asarray(warped))
        target = target if torch.is_tensor(target) else torch.from_numpy(np.asarray(target))
        if warped.shape != target.shape:
            raise ShapeError(f"shape mismatch: {tuple(warped.shape)} vs {tuple(target.shape)}")
        return (warped - target).abs().mean()
    warped = np.asarray(warped)
    target = np.asarray(target)
    if warped.shape != target.shape:
        raise ShapeError(f"shape mismatch: {warped.shape} vs {target.shape}")
    return float(np.mean(np.abs(warped - target)))


def _hsv_to_rgb(hue, sat, val):
    """Vectorized HSV to RGB, all channels in [0, 1]."""
    k = np.floor(hue * 6.0).astype(np.int64) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1.0 - sat)
    q = val * (1.0 - f * sat)
    t = val * (1.0 - (1.0 - f) * sat)
    r = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [val, q, p, p, t, val])
    g = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [t, val, val, q, p, p])
    b = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [p, p, t, val, val, q])
    return np.stack([r, g, b], axis=-1)


def field_to_color(field, max_magnitude=8.0):
    """Render a field as a color-wheel image: hue = direction, saturation = magnitude.

    Saturation is magnitude / max_magnitude clipped to [0, 1], so the
    mapping is fixed and two fields that differ by a positive scale get
    the same hues but different saturations.  Pass max_magnitude=None
    to normalize by the field's own maximum instead (display only).
    Zero offsets render white.

    Returns a uint8 array of shape (H, W, 3).
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[-1] != 2:
        raise ShapeError(f"expected a single field of shape (H, W, 2), got {field.shape}")
    mag = np.sqrt(field[..., 0] ** 2 + field[..., 1] ** 2)
    if max_magnitude is None:
        denom = max(float(mag.max()), 1e-12)
    else:
        if max_magnitude <= 0:
            raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")
        denom = float(max_magnitude)
    hue = (np.arctan2(field[..., 1], field[..., 0]) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / denom, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255.0).astype(np.uint8)


def save_fields(path, fields):
    """Write one or more fields to a .dfld container.

    Accepts (H, W, 2) or (T, H, W, 2); data is stored as little-endian
    float32, so a load after save round-trips float32 input exactly.
    """
    fields = np.asarray(fields, dtype=np.float32)
    if fields.ndim == 3:
        fields = fields[None]
    if fields.ndim != 4 or fields.shape[-1] != 2:
        raise ShapeError(f"expected fields of shape (T, H, W, 2), got {fields.shape}")
    t, h, w, _ = fields.shape
    if h < 2 or w < 2:
        raise ShapeError(f"field dimensions must be at least 2x2, got {h}x{w}")
    with open(path, "wb") as fh:
        fh.write(_DFLD_MAGIC)
        fh.write(_DFLD_HEADER.pack(_DFLD_VERSION, h, w, t))
        fh.write(np.ascontiguousarray(fields, dtype="<f4").tobytes())


def load_fields(path):
    """Read a .dfld container back as a float32 array of shape (T, H, W, 2).

    Raises DataFormatError for a wrong magic or unsupported version and
    CorruptionError for truncated or oversized payloads.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_DFLD_MAGIC):
        raise CorruptionError(f"{path}: file too short to contain a header")
    if blob[: len(_DFLD_MAGIC)] != _DFLD_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a .dfld file")
    if len(blob) < len(_DFLD_MAGIC) + _DFLD_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    version, h, w, t = _DFLD_HEADER.unpack_from(blob, len(_DFLD_MAGIC))
    if version != _DFLD_VERSION:
        raise DataFormatError(f"{path}: unsupported .dfld version {version}")
    expected = t * h * w * 2 * 4
    payload = blob[len(_DFLD_MAGIC) + _DFLD_HEADER.size:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, 2)
    return data.astype(np.float32, copy=True)
