import colorsys

import numpy as np
import pytest
import torch

from dftn.errors import CorruptionError, DataFormatError, ShapeError
from dftn.warp import (
    bilinear_warp,
    field_magnitude,
    field_to_color,
    flip_field_horizontal,
    identity_field,
    load_fields,
    photometric_l1,
    save_fields,
)

SRC_2X2 = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)


def uniform_field(h, w, dx, dy):
    f = identity_field(h, w)
    f[..., 0] = dx
    f[..., 1] = dy
    return f


def test_identity_warp_is_exact():
    rng = np.random.default_rng(0)
    img = rng.random((7, 9)).astype(np.float32)
    out = bilinear_warp(img, identity_field(7, 9))
    assert out.dtype == np.float32
    assert np.array_equal(out, img)


def test_half_pixel_shift_x():
    # dx=0.5 everywhere: column 0 averages columns 0 and 1, column 1 clamps.
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, 0.5, 0.0))
    expected = np.array([[0.5, 1.0], [2.5, 3.0]], dtype=np.float32)
    assert np.allclose(out, expected, atol=1e-6)


def test_half_pixel_shift_y():
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, 0.0, 0.5))
    expected = np.array([[1.0, 2.0], [2.0, 3.0]], dtype=np.float32)
    assert np.allclose(out, expected, atol=1e-6)


def test_half_pixel_shift_diagonal():
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, 0.5, 0.5))
    expected = np.array([[1.5, 2.0], [2.5, 3.0]], dtype=np.float32)
    assert np.allclose(out, expected, atol=1e-6)


def test_negative_shift_clamps_left_edge():
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, -0.5, 0.0))
    expected = np.array([[0.0, 0.5], [2.0, 2.5]], dtype=np.float32)
    assert np.allclose(out, expected, atol=1e-6)


def test_large_offset_clamps_to_corner():
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, 10.0, 10.0))
    assert np.allclose(out, np.full((2, 2), 3.0), atol=1e-6)
    out = bilinear_warp(SRC_2X2, uniform_field(2, 2, -10.0, -10.0))
    assert np.allclose(out, np.zeros((2, 2)), atol=1e-6)


def test_warp_output_within_source_range():
    rng = np.random.default_rng(1)
    img = rng.random((11, 13)).astype(np.float32)
    field = (rng.random((11, 13, 2)).astype(np.float32) - 0.5) * 30.0
    out = bilinear_warp(img, field)
    assert out.min() >= img.min() - 1e-6
    assert out.max() <= img.max() + 1e-6


def test_warp_batched_matches_per_item():
    rng = np.random.default_rng(2)
    imgs = rng.random((4, 6, 5)).astype(np.float32)
    fields = (rng.random((4, 6, 5, 2)).astype(np.float32) - 0.5) * 4.0
    batched = bilinear_warp(imgs, fields)
    for i in range(4):
        single = bilinear_warp(imgs[i], fields[i])
        assert np.allclose(batched[i], single, atol=1e-7)


def test_warp_preserves_container_and_dtype():
    img = torch.rand(3, 4, dtype=torch.float64)
    field = torch.zeros(3, 4, 2, dtype=torch.float64)
    out = bilinear_warp(img, field)
    assert torch.is_tensor(out)
    assert out.dtype == torch.float64
    out_np = bilinear_warp(img.numpy(), field.numpy())
    assert isinstance(out_np, np.ndarray)
    assert out_np.dtype == np.float64


def test_warp_shape_validation():
    with pytest.raises(ShapeError):
        bilinear_warp(SRC_2X2, np.zeros((2, 2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        bilinear_warp(SRC_2X2, np.zeros((3, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        bilinear_warp(np.zeros((1, 5), dtype=np.float32), np.zeros((1, 5, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        identity_field(1, 5)


def test_flip_field_is_involution():
    rng = np.random.default_rng(3)
    field = rng.standard_normal((5, 8, 2)).astype(np.float32)
    twice = flip_field_horizontal(flip_field_horizontal(field))
    assert np.array_equal(twice, field)


def test_flip_equivariance():
    rng = np.random.default_rng(4)
    img = rng.random((8, 9)).astype(np.float32)
    field = (rng.random((8, 9, 2)).astype(np.float32) - 0.5) * 6.0
    left = bilinear_warp(img[:, ::-1].copy(), flip_field_horizontal(field))
    right = bilinear_warp(img, field)[:, ::-1]
    assert np.abs(left - right).max() <= 1e-5


def test_field_magnitude():
    field = uniform_field(2, 2, 3.0, 4.0)
    assert np.allclose(field_magnitude(field), 5.0)


# Gradient checks: float64 central differences against autograd, offsets kept
# at least 0.1 px away from integer grid lines and away from the borders.


def interior_field(rng, h, w, feather=0.2):
    xs = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    ys = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1)
    tx = np.clip(xs + rng.standard_normal((h, w)), 0.5, w - 1.5)
    ty = np.clip(ys + rng.standard_normal((h, w)), 0.5, h - 1.5)
    tx = np.floor(tx) + np.clip(tx - np.floor(tx), feather, 1.0 - feather)
    ty = np.floor(ty) + np.clip(ty - np.floor(ty), feather, 1.0 - feather)
    return np.stack([tx - xs, ty - ys], axis=-1)


def central_diff_grad(fn, x, h=1e-5):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def assert_grads_close(analytic, numeric, rel=1e-3):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), 1e-3)
    assert (diff <= rel * scale).all(), f"max rel err {(diff / scale).max():.3e}"


def test_warp_gradient_wrt_field():
    rng = np.random.default_rng(5)
    img = rng.random((5, 6))
    field = interior_field(rng, 5, 6)
    coeff = rng.standard_normal((5, 6))

    def objective(f):
        t = torch.from_numpy(f)
        return float((bilinear_warp(torch.from_numpy(img), t) * torch.from_numpy(coeff)).sum())

    t_field = torch.from_numpy(field.copy()).requires_grad_(True)
    loss = (bilinear_warp(torch.from_numpy(img), t_field) * torch.from_numpy(coeff)).sum()
    loss.backward()
    numeric = central_diff_grad(objective, field.copy())
    assert_grads_close(t_field.grad.numpy(), numeric)


def test_warp_gradient_wrt_source():
    rng = np.random.default_rng(6)
    img = rng.random((5, 6))
    field = interior_field(rng, 5, 6)
    coeff = rng.standard_normal((5, 6))

    def objective(s):
        t = torch.from_numpy(s)
        return float((bilinear_warp(t, torch.from_numpy(field)) * torch.from_numpy(coeff)).sum())

    t_img = torch.from_numpy(img.copy()).requires_grad_(True)
    loss = (bilinear_warp(t_img, torch.from_numpy(field)) * torch.from_numpy(coeff)).sum()
    loss.backward()
    numeric = central_diff_grad(objective, img.copy())
    assert_grads_close(t_img.grad.numpy(), numeric)


def test_photometric_l1_value_and_gradient():
    warped = np.array([[0.0, 1.0], [2.0, 3.0]])
    target = np.ones((2, 2))
    assert photometric_l1(warped, target) == pytest.approx(1.0)

    rng = np.random.default_rng(7)
    a = rng.random((4, 5))
    tgt = a + rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(0.1, 0.5, size=(4, 5))

    def objective(x):
        return float(photometric_l1(torch.from_numpy(x), torch.from_numpy(tgt)))

    t = torch.from_numpy(a.copy()).requires_grad_(True)
    photometric_l1(t, torch.from_numpy(tgt)).backward()
    numeric = central_diff_grad(objective, a.copy())
    assert_grads_close(t.grad.numpy(), numeric)


def test_end_to_end_warp_loss_gradient():
    # Gradient of the warp loss with respect to the field, the configuration
    # used by self-supervised training.
    rng = np.random.default_rng(8)
    img = rng.random((5, 6))
    tgt = rng.random((5, 6))
    field = interior_field(rng, 5, 6)

    def objective(f):
        warped = bilinear_warp(torch.from_numpy(img), torch.from_numpy(f))
        return float(photometric_l1(warped, torch.from_numpy(tgt)))

    t_field = torch.from_numpy(field.copy()).requires_grad_(True)
    photometric_l1(bilinear_warp(torch.from_numpy(img), t_field), torch.from_numpy(tgt)).backward()
    numeric = central_diff_grad(objective, field.copy())
    assert_grads_close(t_field.grad.numpy(), numeric)


def test_field_to_color_anchors():
    right = uniform_field(2, 2, 8.0, 0.0)
    assert np.array_equal(field_to_color(right)[0, 0], [255, 0, 0])
    left = uniform_field(2, 2, -8.0, 0.0)
    assert np.array_equal(field_to_color(left)[0, 0], [0, 255, 255])
    down = uniform_field(2, 2, 0.0, 8.0)
    assert np.array_equal(field_to_color(down)[0, 0], [128, 255, 0])
    zero = identity_field(3, 3)
    assert np.array_equal(field_to_color(zero), np.full((3, 3, 3), 255, dtype=np.uint8))


def test_field_to_color_scale_changes_saturation_not_hue():
    rng = np.random.default_rng(9)
    field = rng.uniform(-2.0, 2.0, size=(4, 4, 2))
    field[np.abs(field) < 0.2] = 0.5  # keep magnitudes clearly nonzero
    a = field_to_color(field)
    b = field_to_color(field * 2.0)
    for y in range(4):
        for x in range(4):
            ha, sa, _ = colorsys.rgb_to_hsv(*(a[y, x] / 255.0))
            hb, sb, _ = colorsys.rgb_to_hsv(*(b[y, x] / 255.0))
            assert abs(ha - hb) < 0.02 or abs(abs(ha - hb) - 1.0) < 0.02
            assert sb > sa + 0.05


def test_field_to_color_deterministic():
    field = np.array([[[0.3, -1.2], [2.0, 0.0]], [[0.0, 0.0], [-4.0, 4.0]]])
    assert np.array_equal(field_to_color(field), field_to_color(field))


def test_dfld_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    fields = rng.standard_normal((3, 5, 4, 2)).astype(np.float32)
    path = tmp_path / "clip.dfld"
    save_fields(path, fields)
    back = load_fields(path)
    assert back.shape == (3, 5, 4, 2)
    assert np.array_equal(back, fields)


def test_dfld_single_field_gains_leading_axis(tmp_path):
    path = tmp_path / "one.dfld"
    save_fields(path, uniform_field(4, 4, 1.0, -1.0))
    assert load_fields(path).shape == (1, 4, 4, 2)


def test_dfld_bad_magic(tmp_path):
    path = tmp_path / "bad.dfld"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataFormatError):
        load_fields(path)


def test_dfld_unsupported_version(tmp_path):
    path = tmp_path / "v9.dfld"
    save_fields(path, uniform_field(2, 2, 0.0, 0.0))
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        load_fields(path)


def test_dfld_truncation_detected(tmp_path):
    path = tmp_path / "cut.dfld"
    save_fields(path, np.zeros((2, 4, 4, 2), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(CorruptionError):
        load_fields(path)
