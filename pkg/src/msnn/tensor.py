"""Dense 2-D array primitives shared by the ASSOM and network code.

Maps are plain ``float64`` numpy arrays of shape ``(rows, cols)``; patch
vectors are 1-D arrays flattened row-major.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEGENERACY_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class DegeneracyError(ValueError):
    """Raised when Gram-Schmidt meets a (numerically) dependent vector."""

    def __init__(self, index, norm):
        super().__init__(f"vector {index} is linearly dependent on its predecessors "
                         f"(residual norm {norm:.3e})")
        self.index = index


def as_map(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {a.shape}")
    return a


def flip2(kernel):
    """Flip a kernel along both axes."""
    return np.ascontiguousarray(as_map(kernel)[::-1, ::-1])


def _check_fits(map_, side_r, side_c, what="kernel"):
    if side_r > map_.shape[0] or side_c > map_.shape[1]:
        raise DimensionError(f"{what} {side_r}x{side_c} does not fit in map "
                             f"{map_.shape[0]}x{map_.shape[1]}")


def extract_patches(map_, field_side, stride=1):
    """Enumerate ``field_side`` square windows of ``map_``.

    Returns a list of ``(row, col, patch)`` tuples in row-major order of the
    window's top-left corner. Each patch is a flattened copy of the window.
    """
    map_ = as_map(map_)
    if field_side < 1 or stride < 1:
        raise DimensionError("field_side and stride must be positive")
    _check_fits(map_, field_side, field_side, "field")
    rows, cols = map_.shape
    out = []
    for r in range(0, rows - field_side + 1, stride):
        for c in range(0, cols - field_side + 1, stride):
            out.append((r, c, map_[r:r + field_side, c:c + field_side].ravel().copy()))
    return out


def patch_matrix(map_, field_side, stride=1):
    """Same windows as :func:`extract_patches`, stacked as a ``(count, k*k)`` array."""
    map_ = as_map(map_)
    _check_fits(map_, field_side, field_side, "field")
    win = sliding_window_view(map_, (field_side, field_side))[::stride, ::stride]
    return win.reshape(-1, field_side * field_side).copy()


def demean(p):
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise DimensionError("cannot demean an empty patch")
    return p - p.mean()


def valid_cross_correlate(map_, kernel, demean_windows=False):
    """Sliding inner product of ``kernel`` over every full window of ``map_``.

    The kernel is not flipped. With ``demean_windows`` each window has its own
    mean removed before the inner product.
    """
    map_ = as_map(map_)
    kernel = as_map(kernel)
    kr, kc = kernel.shape
    _check_fits(map_, kr, kc)
    win = sliding_window_view(map_, (kr, kc))
    if demean_windows:
        win = win - win.mean(axis=(2, 3), keepdims=True)
    return np.einsum("uvab,ab->uv", win, kernel)


def valid_convolve(map_, kernel):
    return valid_cross_correlate(map_, flip2(kernel))


def full_cross_correlate(map_, kernel):
    """Correlation over every overlap position (zero padding of ``k-1`` on each side)."""
    map_ = as_map(map_)
    kernel = as_map(kernel)
    kr, kc = kernel.shape
    padded = np.pad(map_, ((kr - 1, kr - 1), (kc - 1, kc - 1)))
    return valid_cross_correlate(padded, kernel)


def full_convolve(map_, kernel):
    return full_cross_correlate(map_, flip2(kernel))


def avg_downsample(map_, scale):
    """Non-overlapping ``scale`` x ``scale`` mean pooling."""
    map_ = as_map(map_)
    rows, cols = map_.shape
    if scale < 1 or rows % scale or cols % scale:
        raise DimensionError(f"map {rows}x{cols} is not divisible by pool scale {scale}")
    return map_.reshape(rows // scale, scale, cols // scale, scale).mean(axis=(1, 3))


def upsample_uniform(map_, scale, gain=1.0):
    """Replicate every unit into a ``scale`` x ``scale`` tile, multiplied by ``gain``."""
    map_ = as_map(map_)
    if scale < 1:
        raise DimensionError("scale must be positive")
    return np.kron(map_, np.full((scale, scale), float(gain)))


def gram_schmidt(vectors, tol=DEGENERACY_TOL):
    """Orthonormalize the rows of ``vectors`` in order.

    Uses the modified Gram-Schmidt sweep; spans of every leading subset are
    preserved. Raises :class:`DegeneracyError` naming the first vector whose
    residual norm falls below ``tol``.
    """
    v = np.array(vectors, dtype=np.float64, copy=True)
    if v.ndim != 2:
        raise DimensionError("expected a 2-D stack of vectors")
    count, dim = v.shape
    if count > dim:
        raise DimensionError(f"{count} vectors cannot be independent in dimension {dim}")
    for i in range(count):
        for j in range(i):
            v[i] -= np.dot(v[j], v[i]) * v[j]
        norm = np.linalg.norm(v[i])
        if norm < tol:
            raise DegeneracyError(i, norm)
        v[i] /= norm
    return v


def gram_deviation(basis):
    """``max |B B^T - I|`` for a stack of row vectors."""
    basis = np.asarray(basis, dtype=np.float64)
    return float(np.abs(basis @ basis.T - np.eye(basis.shape[0])).max())
