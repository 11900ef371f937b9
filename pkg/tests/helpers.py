"""Measurement helpers shared by the test modules."""
import numpy as np


def fwhm(profile: np.ndarray) -> float:
    """Full width at half maximum of a single-peaked profile, linearly interpolated."""
    profile = np.abs(np.asarray(profile)).astype(np.float64)
    peak = int(np.argmax(profile))
    half = profile[peak] / 2
    left = peak
    while left > 0 and profile[left - 1] > half:
        left -= 1
    right = peak
    while right < profile.size - 1 and profile[right + 1] > half:
        right += 1
    x_left = left - 1 + (profile[left - 1] - half) / (profile[left - 1] - profile[left]) if left > 0 else left
    x_right = right + (profile[right] - half) / (profile[right] - profile[right + 1]) if right < profile.size - 1 else right
    return float(x_right - x_left)


def smooth_random(rows: int, cols: int, seed: int, amplitude: float = 2.0) -> np.ndarray:
    """Low-frequency random plane built from a few cosines."""
    rng = np.random.default_rng(seed)
    z, x = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    plane = np.zeros((rows, cols))
    for _ in range(3):
        fz, fx = rng.uniform(0.2, 1.5, 2) * 2 * np.pi / np.array([rows, cols])
        plane += np.cos(fz * z + fx * x + rng.uniform(0, 2 * np.pi))
    return amplitude * plane / 3
