"""Kaiser-Bessel gridding for non-uniform inverse DFTs.

Computes p[r] = (1/n) * sum_j c_j * exp(+2i*pi*u_j*r/n) for r = 0..n-1, the
non-uniform generalization of numpy's ifft (at u_j = j it reduces to ifft(c)).
Nodes are spread onto an oversampled grid with a Kaiser-Bessel kernel, transformed
with one FFT and deapodized in the image domain.
"""
import math
from typing import Optional

import numpy as np
from scipy.special import i0


def kaiser_bessel_beta(width: int, oversampling: float) -> float:
    """Shape parameter from the standard width/oversampling relation."""
    return math.pi * math.sqrt((width / oversampling) ** 2 * (oversampling - 0.5) ** 2 - 0.8)


def kaiser_bessel(u: np.ndarray, width: int, beta: float) -> np.ndarray:
    """Kernel I0(beta * sqrt(1 - (2u/width)^2)) on |u| <= width/2, zero outside."""
    u = np.asarray(u, dtype=np.float64)
    arg = 1.0 - (2.0 * u / width) ** 2
    inside = arg >= 0
    out = np.zeros_like(u)
    out[inside] = i0(beta * np.sqrt(arg[inside]))
    return out


def kaiser_bessel_ft(nu: np.ndarray, width: int, beta: float) -> np.ndarray:
    """Continuous Fourier transform of the kernel at frequency nu (cycles per grid step)."""
    nu = np.asarray(nu, dtype=np.float64)
    z = np.sqrt((beta ** 2 - (math.pi * width * nu) ** 2).astype(np.complex128))
    small = np.abs(z) < 1e-8
    z_safe = np.where(small, 1.0, z)
    out = np.where(small, 1.0 + 0j, np.sinh(z_safe) / z_safe)
    return width * out.real


def nonuniform_ifft(u: np.ndarray, c: np.ndarray, n: int, oversampling: float = 2.0,
                    width: int = 8, beta: Optional[float] = None) -> np.ndarray:
    """Gridded evaluation of (1/n) * sum_j c_j exp(2i*pi*u_j*r/n), r = 0..n-1.

    ``u`` and ``c`` may be 1D (one transform) or 2D with one transform per row.
    Accumulation onto the grid is sequential in node order, so results are
    reproducible bit for bit.
    """
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.complex128)
    squeeze = u.ndim == 1
    u = np.atleast_2d(u)
    c = np.atleast_2d(c)
    if u.shape != c.shape:
        raise ValueError(f"node and coefficient shapes differ: {u.shape} vs {c.shape}")
    if beta is None:
        beta = kaiser_bessel_beta(width, oversampling)
    batch, n_nodes = u.shape
    grid_size = int(math.ceil(oversampling * n))
    grid_size += grid_size % 2

    # Outputs are evaluated on the centered index r' = r - n//2 so that the
    # deapodization frequencies stay within +-1/(2*oversampling).
    shift = n // 2
    c = c * np.exp(2j * np.pi * u * shift / n)
    t = u * grid_size / n
    first = np.ceil(t - width / 2.0).astype(np.int64)
    offsets = np.arange(width)
    taps = first[..., None] + offsets
    weights = kaiser_bessel(t[..., None] - taps, width, beta)

    grid = np.zeros((batch, grid_size), dtype=np.complex128)
    rows = np.broadcast_to(np.arange(batch)[:, None, None], taps.shape)
    np.add.at(grid, (rows.ravel(), np.mod(taps, grid_size).ravel()),
              (c[..., None] * weights).ravel())

    spectrum = np.fft.ifft(grid, axis=-1) * grid_size
    centered = np.arange(n) - shift
    values = spectrum[:, np.mod(centered, grid_size)]
    values /= kaiser_bessel_ft(centered / grid_size, width, beta)
    values /= n
    return values[0] if squeeze else values


def nonuniform_ifft_direct(u: np.ndarray, c: np.ndarray, n: int) -> np.ndarray:
    """Direct O(n * nodes) evaluation of the same sum; the reference for gridding."""
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.complex128)
    r = np.arange(n)
    if u.ndim == 1:
        return np.exp(2j * np.pi * np.outer(r, u) / n) @ c / n
    return np.stack([np.exp(2j * np.pi * np.outer(r, uu) / n) @ cc / n for uu, cc in zip(u, c)])
