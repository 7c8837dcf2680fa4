"""Deterministic sampling lattice used by operator validation and
condition checks.

The lattice is 21 time points crossed with radial shells
|x| in {0, 0.5, ..., 2*r_check} and a fixed fan of directions
(two signs in 1D, 32 equally spaced angles in 2D).  It is cheap and
covers the asymptotic regimes the growth/decay inequalities hinge on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SampleLattice", "build_lattice"]


@dataclass(frozen=True)
class SampleLattice:
    dim: int
    times: np.ndarray          # (n_t,)
    points: np.ndarray         # (n_p, dim)
    radii: np.ndarray          # (n_p,) Euclidean norm per point
    shell_radii: np.ndarray    # distinct shell radii, ascending
    r_check: float

    def describe(self):
        return (f"lattice(dim={self.dim}, times={len(self.times)} in "
                f"[{self.times[0]:g},{self.times[-1]:g}], "
                f"shells=0..{self.shell_radii[-1]:g} step 0.5, "
                f"points={len(self.points)})")

    def coords(self):
        """Coordinate arrays (one per axis) for vectorized evaluation."""
        return [self.points[:, i] for i in range(self.dim)]


def build_lattice(dim, interval, r_check=10.0, n_times=21, n_dirs=32,
                  shell_step=0.5):
    if dim not in (1, 2):
        raise ValueError("lattice supports dim 1 or 2")
    t0, t1 = interval
    times = np.linspace(t0, t1, n_times)
    shells = np.arange(0.0, 2 * r_check + shell_step / 2, shell_step)
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        angles = np.linspace(0.0, 2 * np.pi, n_dirs, endpoint=False)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = [np.zeros(dim)]
    for rho in shells[1:]:
        for u in dirs:
            pts.append(rho * u)
    points = np.array(pts)
    radii = np.linalg.norm(points, axis=1)
    return SampleLattice(dim=dim, times=times, points=points, radii=radii,
                         shell_radii=shells, r_check=r_check)
