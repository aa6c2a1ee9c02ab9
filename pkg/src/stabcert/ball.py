"""Axis-weighted l-infinity uncertainty boxes around a nominal input."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbationBall:
    center: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if c.shape != r.shape:
            raise ValueError(f"center has {c.size} entries but radii has {r.size}")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("radii must be finite and non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radii", r)

    @classmethod
    def from_relative(cls, center, fraction, floor=None) -> "PerturbationBall":
        """Radii equal to ``fraction * |center|``, shrunk so the box stays above ``floor``."""
        center = np.asarray(center, dtype=float)
        radii = np.abs(center) * np.broadcast_to(np.asarray(fraction, dtype=float), center.shape)
        if floor is not None:
            room = np.maximum(center - np.broadcast_to(floor, center.shape), 0.0)
            clipped = radii > room
            if np.any(clipped):
                log.warning("clamping %d radii to respect physical floors", int(clipped.sum()))
            radii = np.minimum(radii, room)
        return cls(center, radii)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.radii

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.radii

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(np.asarray(x) - self.center) <= self.radii + tol))

    def scaled(self, s: float) -> "PerturbationBall":
        return PerturbationBall(self.center, self.radii * s)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.center + self.radii * rng.uniform(-1.0, 1.0, size=(n, self.dim))

    def corners(self) -> np.ndarray:
        d = self.dim
        signs = ((np.arange(2 ** d)[:, None] >> np.arange(d)) & 1) * 2 - 1
        return self.center + signs * self.radii
