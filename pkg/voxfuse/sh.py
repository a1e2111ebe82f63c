"""Real spherical harmonics for voxel colors (degree 0..3)."""
import numpy as np

from voxfuse.errors import DomainError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

MAX_SH_DEGREE = 3


def num_coeffs(degree: int) -> int:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise DomainError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def degree_from_coeffs(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if (degree + 1) ** 2 != count:
        raise DomainError(f"{count} is not a valid SH coefficient count")
    return degree


def rgb_to_sh(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh0) -> np.ndarray:
    return np.asarray(sh0, dtype=np.float64) * SH_C0 + 0.5


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate colors from coefficients `sh` (N, K, 3) at unit directions (N, 3).

    Returns RGB (N, 3) clipped to [0, 1].
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = degree_from_coeffs(sh.shape[1])
    result = SH_C0 * sh[:, 0]
    if degree > 0:
        d = np.asarray(dirs, dtype=np.float64)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (result
                      + SH_C2[0] * xy * sh[:, 4]
                      + SH_C2[1] * yz * sh[:, 5]
                      + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                      + SH_C2[3] * xz * sh[:, 7]
                      + SH_C2[4] * (xx - yy) * sh[:, 8])
            if degree > 2:
                result = (result
                          + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
                          + SH_C3[1] * xy * z * sh[:, 10]
                          + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
                          + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
                          + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
                          + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                          + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return np.clip(result + 0.5, 0.0, 1.0)
