import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eikonal.imageio import (PSNR_INF, MalformedHeader, PfmError, TruncatedPayload,
                             UnsupportedEndianness, decode_pfm, encode_pfm, psnr, read_mask_ppm,
                             read_pfm, read_ppm, ssim, to_preview_bytes, write_mask_ppm,
                             write_pfm, write_ppm_preview)

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_1x1.pfm")


def test_golden_file_bytes():
    expect = b"Pf\n1 1\n-1.0\n" + bytes([0x00, 0x00, 0x80, 0x3E])
    with open(GOLDEN, "rb") as f:
        assert f.read() == expect
    assert encode_pfm(np.array([[0.25]], dtype=np.float32)) == expect
    assert read_pfm(GOLDEN).tolist() == [[[0.25]]]


@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.data())
def test_pfm_roundtrip_bitwise(h, w, c, data):
    img = data.draw(arrays(np.float32, (h, w, c),
                           elements=st.floats(width=32, allow_nan=False)))
    back = decode_pfm(encode_pfm(img))
    assert back.dtype == np.float32 and back.shape == (h, w, c)
    assert back.tobytes() == img.tobytes()


def test_pfm_rows_bottom_to_top():
    img = np.array([[1.0], [2.0]], dtype=np.float32)[:, :, None]
    buf = encode_pfm(img)
    payload = np.frombuffer(buf[-8:], "<f4")
    assert payload.tolist() == [2.0, 1.0]


def test_pfm_errors(tmp_path):
    with pytest.raises(TruncatedPayload):
        decode_pfm(b"PF\n1 1\n-1.0\n" + bytes(4))
    with pytest.raises(MalformedHeader):
        decode_pfm(b"P6\n1 1\n-1.0\n" + bytes(4))
    with pytest.raises(MalformedHeader):
        decode_pfm(b"Pf\n1 x\n-1.0\n" + bytes(4))
    with pytest.raises(MalformedHeader):
        decode_pfm(b"Pf\n0 1\n-1.0\n")
    with pytest.raises(MalformedHeader):
        decode_pfm(b"Pf\n1 1\n")
    with pytest.raises(UnsupportedEndianness):
        decode_pfm(b"Pf\n1 1\n1.0\n" + bytes(4))
    p = tmp_path / "t.pfm"
    p.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(4))
    with pytest.raises(PfmError, match="t.pfm"):
        read_pfm(p)
    with pytest.raises(ValueError):
        encode_pfm(np.zeros((2, 2, 2)))


def test_pfm_file_roundtrip(tmp_path, rng):
    img = rng.normal(size=(5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    assert read_pfm(tmp_path / "a.pfm").tobytes() == img.tobytes()


def test_preview_and_mask(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [2.0, -1.0, 0.218]]], dtype=np.float32)
    q = to_preview_bytes(img)
    assert q[0, 0].tolist() == [0, round(255 * 0.5 ** (1 / 2.2)), 255]
    assert q[0, 1].tolist()[:2] == [255, 0]
    write_ppm_preview(tmp_path / "p.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "p.ppm"), q)
    m = np.array([[True, False], [False, True]])
    write_mask_ppm(tmp_path / "m.ppm", m)
    assert np.array_equal(read_mask_ppm(tmp_path / "m.ppm"), m)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")


def test_psnr_examples(rng):
    a = rng.uniform(size=(12, 12, 3))
    assert psnr(a, a) == PSNR_INF
    assert psnr(np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.3)) == pytest.approx(20.0)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1), peak=2.0) == pytest.approx(
        10 * math.log10(4.0 / 0.01))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def _ssim_scalar(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Direct per-window SSIM with explicit loops."""
    r = size // 2
    ax = np.arange(size) - r
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    vals = []
    for i in range(r, x.shape[0] - r):
        for j in range(r, x.shape[1] - r):
            px = x[i - r:i + r + 1, j - r:j + r + 1]
            py = y[i - r:i + r + 1, j - r:j + r + 1]
            mx, my = (g * px).sum(), (g * py).sum()
            vx = (g * (px - mx) ** 2).sum()
            vy = (g * (py - my) ** 2).sum()
            cxy = (g * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_scalar_reference(rng):
    a = rng.uniform(size=(16, 18, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = np.mean([_ssim_scalar(a[:, :, c], b[:, :, c]) for c in range(3)])
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_identical_and_range(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == 1.0
    s = ssim(a, 1.0 - a)
    assert -1.0 <= s < 0.0
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.ones((8, 8, 3)))
