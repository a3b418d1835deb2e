"""Real spherical harmonics up to degree 3, in the ordering used by 3D-GS.

Coefficients are laid out channel-major: ``sh[..., channel, basis]`` with
``(degree + 1) ** 2`` basis functions per channel.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgument

MAX_DEGREE = 3
SH_OFFSET = 0.5

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def num_basis(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_basis(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or num_basis(degree) != count:
        raise InvalidArgument(f"{count} is not a square SH basis count")
    return degree


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the basis at unit directions ``dirs[..., 3]`` -> ``[..., (degree+1)**2]``."""
    if not 0 <= degree <= MAX_DEGREE:
        raise InvalidArgument(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_basis(degree),))
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Partial derivatives of each basis polynomial: ``[..., basis, 3]``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    jac = np.zeros(dirs.shape[:-1] + (num_basis(degree), 3))
    if degree >= 1:
        jac[..., 1, 1] = -C1
        jac[..., 2, 2] = C1
        jac[..., 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        jac[..., 4, 0] = C2[0] * y
        jac[..., 4, 1] = C2[0] * x
        jac[..., 5, 1] = C2[1] * z
        jac[..., 5, 2] = C2[1] * y
        jac[..., 6, 0] = -2.0 * C2[2] * x
        jac[..., 6, 1] = -2.0 * C2[2] * y
        jac[..., 6, 2] = 4.0 * C2[2] * z
        jac[..., 7, 0] = C2[3] * z
        jac[..., 7, 2] = C2[3] * x
        jac[..., 8, 0] = 2.0 * C2[4] * x
        jac[..., 8, 1] = -2.0 * C2[4] * y
    if degree >= 3:
        jac[..., 9, 0] = C3[0] * 6.0 * x * y
        jac[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        jac[..., 10, 0] = C3[1] * y * z
        jac[..., 10, 1] = C3[1] * x * z
        jac[..., 10, 2] = C3[1] * x * y
        jac[..., 11, 0] = C3[2] * -2.0 * x * y
        jac[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        jac[..., 11, 2] = C3[2] * 8.0 * y * z
        jac[..., 12, 0] = C3[3] * -6.0 * x * z
        jac[..., 12, 1] = C3[3] * -6.0 * y * z
        jac[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        jac[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        jac[..., 13, 1] = C3[4] * -2.0 * x * y
        jac[..., 13, 2] = C3[4] * 8.0 * x * z
        jac[..., 14, 0] = C3[5] * 2.0 * x * z
        jac[..., 14, 1] = C3[5] * -2.0 * y * z
        jac[..., 14, 2] = C3[5] * (xx - yy)
        jac[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        jac[..., 15, 1] = C3[6] * -6.0 * x * y
    return jac


def sh_eval(sh: np.ndarray, degree: int, dirs: np.ndarray) -> np.ndarray:
    """RGB color from SH coefficients ``sh[..., 3, B]`` seen along ``dirs[..., 3]``.

    Only the first ``(degree+1)**2`` coefficients per channel are used. The
    result is offset by 0.5 and clamped to [0, 1].
    """
    sh = np.asarray(sh, dtype=np.float64)
    stored = degree_from_basis(sh.shape[-1])
    if degree > stored:
        raise InvalidArgument(f"degree {degree} exceeds stored SH degree {stored}")
    return np.clip(sh_dot(sh, sh_basis(degree, dirs)) + SH_OFFSET, 0.0, 1.0)


def sh_dot(sh: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Per-channel sum of coefficient * basis, accumulated in basis order.

    The fixed order makes zero high-degree coefficients contribute exactly nothing.
    """
    out = sh[..., 0] * basis[..., None, 0]
    for b in range(1, basis.shape[-1]):
        out = out + sh[..., b] * basis[..., None, b]
    return out
