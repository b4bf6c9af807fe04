"""Pixel-domain lossy codec round-trips, flips and PSNR.

Two block-transform codecs are provided.  ``jpeg_like_roundtrip`` quantizes
8x8 DCT blocks with the standard luminance table and no post-filter, so it
shows blocking artifacts at low quality.  ``webp_like_roundtrip`` quantizes
4x4 DCT blocks with a uniform step and then runs a simple in-loop deblocking
filter across block edges.  Neither emits a bitstream: the defense only needs
decode(encode(x)).

Every channel is coded independently on the 0-255 scale; outputs are real
valued (not rounded to 8 bits) and clamped to [0, 1].
"""

from __future__ import annotations

import numpy as np

STD_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def _check_qf(qf) -> int:
    if isinstance(qf, bool) or int(qf) != qf or not 0 <= qf <= 100:
        raise ValueError(f"quality factor must be an integer in [0, 100], got {qf!r}")
    return int(qf)


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix D, so coefficients = D @ block @ D.T."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


def jpeg_quant_table(qf: int) -> np.ndarray:
    """libjpeg-style scaling of the luminance table; qf=0 behaves as qf=1."""
    qf = max(_check_qf(qf), 1)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    return np.clip((STD_LUMINANCE_TABLE * scale + 50) // 100, 1, 255)


def webp_step(qf: int) -> int:
    """Uniform AC quantization step of the 4x4 codec."""
    qf = _check_qf(qf)
    return max(1, int(round_half_away(1 + (100 - qf) * 0.63)))


def webp_quant_table(qf: int) -> np.ndarray:
    s = webp_step(qf)
    table = np.full((4, 4), s, dtype=np.int64)
    table[0, 0] = max(1, int(round_half_away(s / 2)))
    return table


def filter_threshold(qf: int) -> int:
    return 2 + (100 - _check_qf(qf)) // 10


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3) or min(img.shape[:2]) < 1:
        raise ValueError(f"expected an (h, w, 1|3) image, got shape {img.shape}")
    return img


def _block_roundtrip(img: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Quantize/dequantize every bxb block of every channel; returns the 0-255 reconstruction."""
    b = table.shape[0]
    h, w, c = img.shape
    ph, pw = -h % b, -w % b
    x = np.pad(img * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge") - 128.0
    H, W = x.shape[:2]
    blocks = x.reshape(H // b, b, W // b, b, c).transpose(0, 2, 4, 1, 3)  # (by, bx, c, b, b)
    d = dct_matrix(b)
    coef = d @ blocks @ d.T
    coef = round_half_away(coef / table) * table
    rec = d.T @ coef @ d
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, c)[:h, :w] + 128.0
    return np.clip(rec, 0.0, 255.0)


def jpeg_like_roundtrip(img, qf: int) -> np.ndarray:
    img = _as_image(img)
    return _block_roundtrip(img, jpeg_quant_table(qf)) / 255.0


def _deblock_255(x: np.ndarray, t: int, cap: int) -> np.ndarray:
    """Simple edge filter on a 0-255 image, vertical edges first, then horizontal.

    ``t`` gates which edges are filtered; corrections are clamped to
    [-min(t, cap), min(t, cap)].
    """
    x = x.copy()
    bound = min(t, cap)
    for axis in (1, 0):
        n = x.shape[axis]
        edges = np.arange(4, n - 1, 4)  # need p1 = e-2 and q1 = e+1 inside the image
        if edges.size == 0:
            continue
        take = lambda off: np.take(x, edges + off, axis=axis)
        p1, p0, q0, q1 = take(-2), take(-1), take(0), take(1)
        a = 3.0 * (q0 - p0) + (p1 - q1)
        d = np.clip(round_half_away(a / 8.0), -bound, bound)
        d = np.where(np.abs(p0 - q0) <= t, d, 0.0)
        # Edges are 4 apart and each touches only columns e-1 and e, so all
        # edges along one axis can be filtered at once.
        idx_p = [slice(None)] * 3
        idx_q = [slice(None)] * 3
        idx_p[axis] = edges - 1
        idx_q[axis] = edges
        x[tuple(idx_p)] = np.clip(p0 + d, 0.0, 255.0)
        x[tuple(idx_q)] = np.clip(q0 - d, 0.0, 255.0)
    return x


def filter_cap(qf: int) -> int:
    """Largest correction the filter may apply: half the quantization step it is undoing."""
    return webp_step(qf) // 2


def deblock_edges(img, qf: int) -> np.ndarray:
    """Smooth small steps across 4-pixel block boundaries; large steps (true edges) are kept."""
    img = _as_image(img)
    x = img * 255.0
    out = _deblock_255(x, filter_threshold(qf), filter_cap(qf))
    # untouched pixels are returned as given, not via a lossy *255/255 trip
    return np.where(out != x, out / 255.0, img)


def webp_like_roundtrip(img, qf: int) -> np.ndarray:
    img = _as_image(img)
    rec = _block_roundtrip(img, webp_quant_table(qf))
    return _deblock_255(rec, filter_threshold(qf), filter_cap(qf)) / 255.0


def flip_lr(img) -> np.ndarray:
    return np.ascontiguousarray(_as_image(img)[:, ::-1, :])


def flip_tb(img) -> np.ndarray:
    return np.ascontiguousarray(_as_image(img)[::-1, :, :])


def psnr(a, b) -> float:
    """PSNR in dB for [0, 1] images; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def boundary_discontinuity(img, block: int = 4) -> float:
    """Blockiness on the 0-255 scale.

    Mean absolute step between neighbours straddling a ``block``-aligned
    boundary, minus the mean absolute step between neighbours inside a block.
    Subtracting the in-block term keeps image texture from counting as
    blocking.  Flat images score 0.
    """
    x = _as_image(img) * 255.0
    dx = np.abs(np.diff(x, axis=1))
    dy = np.abs(np.diff(x, axis=0))
    on_x = (np.arange(dx.shape[1]) + 1) % block == 0
    on_y = (np.arange(dy.shape[0]) + 1) % block == 0
    across = np.concatenate([dx[:, on_x].ravel(), dy[on_y].ravel()])
    inside = np.concatenate([dx[:, ~on_x].ravel(), dy[~on_y].ravel()])
    if across.size == 0:
        return 0.0
    return float(across.mean() - (inside.mean() if inside.size else 0.0))


CODEC_BLOCK = {"jpeg": 8, "webp": 4}
ROUNDTRIPS = {"jpeg": jpeg_like_roundtrip, "webp": webp_like_roundtrip}


def roundtrip(codec: str, img, qf: int) -> np.ndarray:
    try:
        fn = ROUNDTRIPS[codec]
    except KeyError:
        raise ValueError(f"unknown codec {codec!r}") from None
    return fn(img, qf)
