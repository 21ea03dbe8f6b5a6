"""sRGB <-> CIELab conversion with analytic Jacobians.

Conventions (fixed, documented in the README):
  * sRGB companding with the standard 0.04045 / 0.0031308 thresholds.
  * D65 white point, 2-degree observer: (0.95047, 1.0, 1.08883).
  * The XYZ->linear-RGB matrix is the float64 inverse of the forward
    matrix below, so round trips are as tight as the arithmetic allows.
  * Out-of-gamut values in lab_to_rgb are clamped per channel. Clamping
    is silent but counted: the converter returns a clip statistic, and
    the Jacobian rows of clamped channels are zero.

All functions accept a single pixel (3,) or any (..., 3) stack and are
vectorized over leading axes.
"""

from __future__ import annotations

import numpy as np

# linear RGB -> XYZ (sRGB primaries, D65)
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

WHITE_POINT = np.array([0.95047, 1.00000, 1.08883])

# CIE f junction: delta = 6/29
_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA**3  # 216/24389
_FSLOPE = 1.0 / (3.0 * _DELTA**2)  # slope of the linear f branch

# sRGB companding junctions
_SRGB_LO = 0.04045  # encoded-domain threshold
_SRGB_LIN_LO = 0.0031308  # linear-domain threshold

# d(fx,fy,fz)/d(L,a,b) and its inverse, both constant
_FWD_FROM_LAB = np.array(
    [
        [1.0 / 116.0, 1.0 / 500.0, 0.0],
        [1.0 / 116.0, 0.0, 0.0],
        [1.0 / 116.0, 0.0, -1.0 / 200.0],
    ]
)
_LAB_FROM_F = np.array(
    [
        [0.0, 116.0, 0.0],
        [500.0, -500.0, 0.0],
        [0.0, 200.0, -200.0],
    ]
)

# folded forms used by the Lab -> RGB pipeline: fxyz as one affine map of
# Lab, and the white point absorbed into the XYZ -> linear-RGB matrix
_FXYZ_FROM_LAB_T = _FWD_FROM_LAB.T.copy()
_FXYZ_OFFSET = 4.0 / 29.0  # 16/116
_RGB_FROM_F_T = (XYZ_TO_RGB * WHITE_POINT).T.copy()

_FXYZ_FROM_LAB_T32 = _FXYZ_FROM_LAB_T.astype(np.float32)
_FXYZ_OFFSET32 = np.float32(_FXYZ_OFFSET)
_RGB_FROM_F_T32 = _RGB_FROM_F_T.astype(np.float32)
_DELTA32 = np.float32(_DELTA)
_F_OFF32 = np.float32(4.0 / 29.0)
_FSLOPE_INV32 = np.float32(3.0 * _DELTA**2)
_SRGB_LIN_LO32 = np.float32(_SRGB_LIN_LO)


def _srgb_decode(c):
    """Encoded sRGB in [0,1] -> linear RGB."""
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= _SRGB_LO, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c):
    """Linear RGB -> encoded sRGB (no clamping here)."""
    c = np.asarray(c, dtype=np.float64)
    # the power branch is only read above the junction, so clipping at
    # the junction keeps tiny negatives out of the pow without changing
    # any selected value
    safe = np.clip(c, _SRGB_LIN_LO, None)
    return np.where(c <= _SRGB_LIN_LO, 12.92 * c, 1.055 * safe ** (1.0 / 2.4) - 0.055)


def _f(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > _DELTA3, np.cbrt(t), _FSLOPE * t + 4.0 / 29.0)


def _f_inv(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > _DELTA, t * t * t, (t - 4.0 / 29.0) / _FSLOPE)


def rgb_to_lab(rgb):
    """Convert sRGB (..., 3) in [0, 1] to CIELab (..., 3)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = _srgb_decode(rgb)
    xyz = lin @ RGB_TO_XYZ.T
    fxyz = _f(xyz / WHITE_POINT)
    fx, fy, fz = fxyz[..., 0], fxyz[..., 1], fxyz[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab):
    """Convert CIELab (..., 3) to sRGB in [0, 1].

    Returns (rgb, clip_fraction) where clip_fraction is the fraction of
    channel values that fell outside [0, 1] before clamping.
    """
    rgb, frac, _, _ = _lab_to_rgb_impl(lab, False)
    return rgb, frac


def _srgb_encode_deriv(c):
    # right-limit branch derivative at the junction; written as p/x so a
    # caller that already has p = safe**(1/2.4) can reuse it
    c = np.asarray(c, dtype=np.float64)
    safe = np.clip(c, _SRGB_LIN_LO, None)
    power = 1.055 * safe ** (1.0 / 2.4) / (2.4 * safe)
    return np.where(c < _SRGB_LIN_LO, 12.92, power)


def _srgb_decode_deriv(c):
    c = np.asarray(c, dtype=np.float64)
    safe = np.clip(c, _SRGB_LO, None)
    power = (2.4 / 1.055) * ((safe + 0.055) / 1.055) ** 1.4
    return np.where(c < _SRGB_LO, 1.0 / 12.92, power)


def _f_inv_deriv(t):
    # both branches meet with slope 3*delta^2; keep the right-limit form
    t = np.asarray(t, dtype=np.float64)
    return np.where(t < _DELTA, 1.0 / _FSLOPE, 3.0 * (t * t))


def _f_deriv(t):
    t = np.asarray(t, dtype=np.float64)
    r = np.cbrt(np.clip(t, _DELTA3, None))
    return np.where(t < _DELTA3, _FSLOPE, 1.0 / (3.0 * r * r))


def _lab_to_rgb_impl(lab, want_diagonals):
    lab = np.asarray(lab, dtype=np.float64)
    fxyz = lab @ _FXYZ_FROM_LAB_T + _FXYZ_OFFSET
    t2 = fxyz * fxyz
    finv = np.where(fxyz > _DELTA, t2 * fxyz, (fxyz - 4.0 / 29.0) / _FSLOPE)
    lin = finv @ _RGB_FROM_F_T
    safe = np.clip(lin, _SRGB_LIN_LO, None)
    p = safe ** (1.0 / 2.4)
    rgb = np.where(lin <= _SRGB_LIN_LO, 12.92 * lin, 1.055 * p - 0.055)
    clipped = (rgb < 0.0) | (rgb > 1.0)
    frac = float(np.count_nonzero(clipped)) / clipped.size if clipped.size else 0.0
    if not want_diagonals:
        return np.clip(rgb, 0.0, 1.0), frac, None, None

    d_xyz = WHITE_POINT * np.where(fxyz < _DELTA, 1.0 / _FSLOPE, 3.0 * t2)
    d_s = np.where(lin < _SRGB_LIN_LO, 12.92, 1.055 * p / (2.4 * safe))
    d_s = np.where(clipped, 0.0, d_s)
    return np.clip(rgb, 0.0, 1.0), frac, d_s, d_xyz


def lab_to_rgb_diagonals(lab):
    """lab_to_rgb plus the two pointwise factors of its Jacobian.

    Returns (rgb, clip_fraction, d_s, d_xyz): the Jacobian at each pixel
    factors as diag(d_s) @ XYZ_TO_RGB @ diag(d_xyz) @ _FWD_FROM_LAB, with
    d_s already zeroed on gamut-clamped channels. Callers that only need
    Jacobian products should use these with lab_jacobian_vjp instead of
    materializing the full (..., 3, 3) Jacobian.
    """
    return _lab_to_rgb_impl(lab, True)


def lab_jacobian_vjp(d_s, d_xyz, cotangent):
    """Pull an RGB-space cotangent (..., 3) back to Lab space.

    Computes J^T v for the Jacobian factored by lab_to_rgb_diagonals,
    using two flat (N, 3) @ (3, 3) products instead of per-pixel 3x3
    matrices.
    """
    v = np.asarray(cotangent, dtype=np.float64) * d_s
    shape = v.shape
    v = (v.reshape(-1, 3) @ XYZ_TO_RGB).reshape(shape) * d_xyz
    return (v.reshape(-1, 3) @ _FWD_FROM_LAB).reshape(shape)


def lab_to_rgb_jacobian(lab):
    """d(sRGB)/d(Lab) at the given Lab pixel(s): (..., 3) -> (..., 3, 3).

    Rows belonging to gamut-clamped output channels are zero, matching
    the clamp's (sub)gradient. Piecewise junctions use the right-limit
    branch derivative.
    """
    _, _, d_s, d_xyz = _lab_to_rgb_impl(lab, True)
    scaled = XYZ_TO_RGB * d_xyz[..., None, :]  # (..., 3, 3)
    inner = (scaled.reshape(-1, 3) @ _FWD_FROM_LAB).reshape(scaled.shape)
    return d_s[..., :, None] * inner


def lab_to_rgb_f32(lab):
    """Single-precision lab_to_rgb without the clip statistic.

    Bulk candidate-scoring variant: same branch structure as lab_to_rgb
    evaluated in float32. Returns only the clamped RGB array.
    """
    lab = np.asarray(lab, dtype=np.float32)
    fxyz = lab @ _FXYZ_FROM_LAB_T32 + _FXYZ_OFFSET32
    t2 = fxyz * fxyz
    finv = np.where(fxyz > _DELTA32, t2 * fxyz, (fxyz - _F_OFF32) * _FSLOPE_INV32)
    lin = finv @ _RGB_FROM_F_T32
    safe = np.clip(lin, _SRGB_LIN_LO32, None)
    p = safe ** np.float32(1.0 / 2.4)
    p *= np.float32(1.055)
    p -= np.float32(0.055)
    rgb = np.where(lin <= _SRGB_LIN_LO32, np.float32(12.92) * lin, p)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_lab_jacobian(rgb):
    """d(Lab)/d(sRGB) at the given sRGB pixel(s): (..., 3) -> (..., 3, 3)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = _srgb_decode(rgb)
    xyz = lin @ RGB_TO_XYZ.T
    d_f = _f_deriv(xyz / WHITE_POINT) / WHITE_POINT  # (..., 3)
    scaled = _LAB_FROM_F * d_f[..., None, :]  # (..., 3, 3)
    inner = (scaled.reshape(-1, 3) @ RGB_TO_XYZ).reshape(scaled.shape)
    return inner * _srgb_decode_deriv(rgb)[..., None, :]
