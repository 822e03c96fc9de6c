"""Multi-octave gradient ("perlin-style") noise.

Shared by the procedural texture provider and the local anomaly mask
generator. Pure numpy, deterministic given the supplied Generator.
"""

from __future__ import annotations

import numpy as np


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_noise(shape: tuple[int, int], cells: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """One octave of lattice gradient noise, roughly in [-1, 1].

    Args:
        shape: (H, W) of the output field.
        cells: lattice resolution (cells_y, cells_x), each >= 1.
        rng: numpy Generator supplying the lattice gradients.
    """
    h, w = shape
    cy, cx = max(1, cells[0]), max(1, cells[1])
    ang = rng.uniform(0.0, 2.0 * np.pi, size=(cy + 1, cx + 1))
    gy, gx = np.sin(ang), np.cos(ang)

    ys = np.linspace(0.0, cy, h, endpoint=False)
    xs = np.linspace(0.0, cx, w, endpoint=False)
    yi = ys.astype(int)
    xi = xs.astype(int)
    yf = (ys - yi)[:, None]
    xf = (xs - xi)[None, :]

    def corner(dy, dx):
        g_y = gy[yi + dy][:, xi + dx]
        g_x = gx[yi + dy][:, xi + dx]
        return g_y * (yf - dy) + g_x * (xf - dx)

    u = _fade(xf)
    v = _fade(yf)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bot = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bot * v


def multi_octave_noise(
    shape: tuple[int, int],
    rng: np.random.Generator,
    octaves: int = 4,
    base_cells: int = 2,
    persistence: float = 0.6,
) -> np.ndarray:
    """Sum of gradient-noise octaves with doubling lattice resolution.

    Returns a zero-centred field of shape (H, W); amplitude is normalised
    so values land roughly in [-1, 1].
    """
    h, w = shape
    total = np.zeros((h, w), dtype=np.float64)
    amp, amp_sum = 1.0, 0.0
    for k in range(octaves):
        cells = base_cells * (2**k)
        total += amp * gradient_noise(shape, (cells, cells), rng)
        amp_sum += amp
        amp *= persistence
    return total / amp_sum


def normalized_noise(
    shape: tuple[int, int],
    rng: np.random.Generator,
    octaves: int = 4,
    base_cells: int = 2,
    persistence: float = 0.6,
) -> np.ndarray:
    """Multi-octave noise min/max rescaled to [0, 1]."""
    field = multi_octave_noise(shape, rng, octaves=octaves, base_cells=base_cells, persistence=persistence)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        # degenerate (single-pixel outputs); fall back to a flat mid value
        return np.full(shape, 0.5)
    return (field - lo) / (hi - lo)
