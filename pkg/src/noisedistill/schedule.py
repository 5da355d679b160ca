"""Bounded noise schedules shared by the exact theory and the neural pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-exploding noise levels ``sigma_t`` for ``t`` in (0, 1).

    The law is geometric interpolation, ``sigma_t = sigma_min *
    (sigma_max/sigma_min)**t``, which is monotone and keeps every level inside
    ``[sigma_min, sigma_max]``; ``t`` itself is always drawn uniformly.  A
    constant schedule is the ``sigma_min == sigma_max`` special case.  The
    strictly positive floor keeps score integrands finite at every level.
    """

    sigma_min: float = 0.02
    sigma_max: float = 5.0

    def __post_init__(self):
        if not (0 < self.sigma_min <= self.sigma_max):
            raise PreconditionError(
                f"need 0 < sigma_min <= sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )

    def sigma(self, t):
        """Noise level at time ``t`` (scalar or array)."""
        t = np.asarray(t, dtype=float)
        ratio = self.sigma_max / self.sigma_min
        out = self.sigma_min * ratio**t
        return float(out) if out.ndim == 0 else out

    def sample_t(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(0.0, 1.0, size=n)

    def sample_sigma(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sigma(self.sample_t(rng, n))

    def quadrature(self, quad_points: int) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Legendre nodes and weights for averages over t ~ Unif(0, 1)."""
        if quad_points < 1:
            raise PreconditionError(f"need at least one quadrature node, got {quad_points}")
        x, w = np.polynomial.legendre.leggauss(quad_points)
        return (x + 1.0) / 2.0, w / 2.0

    def sampling_grid(self, steps: int) -> np.ndarray:
        """Decreasing geometric grid sigma_max = s[0] > ... > s[-1] = sigma_min."""
        if steps < 2:
            raise PreconditionError(f"need at least 2 grid points, got {steps}")
        return np.geomspace(self.sigma_max, self.sigma_min, steps)
