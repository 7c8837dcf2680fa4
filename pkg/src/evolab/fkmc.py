"""Feynman-Kac Monte Carlo backend.

Estimates (G(t,s)f)(x) by simulating the diffusion with generator
Tr(Q D^2) + b.grad via Euler-Maruyama (left-point coefficients,
sigma*sigma^T = 2Q) and weighting each path by exp(-sum c dt).  Paths
roam the whole space, so this is an oracle for the box-limit solver
output rather than for any single bounded-domain run.

Randomness comes from numpy's Philox counter-based generator; a run is
bit-reproducible from (seed, n_paths, dt_mc) alone.  Super-linear
drifts are tamed by clipping the drift increment to norm
sqrt(dt)*1e3; the clip rate is reported and a rate above 1e-4 marks
the estimate unreliable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import Expr, evaluate

__all__ = ["FkConfig", "FkEstimate", "FkmcError", "estimate",
           "tail_mass_mc"]

RNG_ALGORITHM = "philox"
_CLIP_FACTOR = 1e3
_CLIP_RATE_LIMIT = 1e-4


class FkmcError(Exception):
    pass


@dataclass(frozen=True)
class FkConfig:
    n_paths: int
    dt_mc: float
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("need at least 2 paths")
        if self.dt_mc <= 0:
            raise ValueError("dt_mc must be positive")


@dataclass(frozen=True)
class FkEstimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int
    clip_rate: float
    reliable: bool
    algorithm: str = RNG_ALGORITHM


def _sqrt_2q(Q, n):
    """Pointwise symmetric square root of 2Q; Q entries broadcast to n."""
    if len(Q) == 1:
        q = np.broadcast_to(np.asarray(2.0 * Q[0][0], dtype=float), (n,))
        if np.min(q) <= 0:
            raise FkmcError("diffusion coefficient not positive on a path")
        return [[np.sqrt(q)]]
    a = np.broadcast_to(np.asarray(2.0 * Q[0][0], dtype=float), (n,))
    b = np.broadcast_to(np.asarray(2.0 * Q[0][1], dtype=float), (n,))
    d = np.broadcast_to(np.asarray(2.0 * Q[1][1], dtype=float), (n,))
    det = a * d - b * b
    if np.min(det) <= 0 or np.min(a) <= 0:
        raise FkmcError("2Q not positive definite along a path")
    # sqrt(M) = (M + sqrt(det) I) / sqrt(tr + 2 sqrt(det)) for SPD 2x2
    sd = np.sqrt(det)
    denom = np.sqrt(a + d + 2 * sd)
    return [[(a + sd) / denom, b / denom],
            [b / denom, (d + sd) / denom]]


def _simulate(op, x, s, t, cfg):
    """Run all paths; returns (endpoints list per axis, weights,
    clip_rate)."""
    d = op.dim
    steps = round((t - s) / cfg.dt_mc)
    if steps < 1 or abs(steps * cfg.dt_mc - (t - s)) > 1e-9:
        raise FkmcError("t - s must be a positive multiple of dt_mc")
    dt = cfg.dt_mc
    clip = math.sqrt(dt) * _CLIP_FACTOR
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    n = cfg.n_paths
    x = np.atleast_1d(np.asarray(x, dtype=float))
    X = [np.full(n, x[i]) for i in range(d)]
    log_w = np.zeros(n)
    clipped = 0
    for k in range(steps):
        tk = s + k * dt
        bvals = op.eval_b(tk, X)
        drift = np.stack([np.broadcast_to(np.asarray(bi, dtype=float), (n,))
                          for bi in bvals]) * dt
        norms = np.sqrt(np.sum(drift ** 2, axis=0))
        over = norms > clip
        if over.any():
            clipped += int(over.sum())
            drift[:, over] *= clip / norms[over]
        if cfg.antithetic:
            half = (n + 1) // 2
            xi = rng.standard_normal((d, half))
            xi = np.concatenate([xi, -xi], axis=1)[:, :n]
        else:
            xi = rng.standard_normal((d, n))
        sig = _sqrt_2q(op.eval_Q(tk, X), n)
        noise = [sum(sig[i][j] * xi[j] for j in range(d)) for i in range(d)]
        cvals = np.broadcast_to(
            np.asarray(op.eval_c(tk, X), dtype=float), (n,))
        log_w = log_w - cvals * dt
        X = [X[i] + drift[i] + math.sqrt(dt) * noise[i] for i in range(d)]
        for xi_arr in X:
            if not np.all(np.isfinite(xi_arr)):
                raise FkmcError(
                    f"non-finite path values at step {k + 1}/{steps} "
                    f"(t={tk + dt:g}); drift taming insufficient")
    clip_rate = clipped / (n * steps)
    return X, np.exp(log_w), clip_rate


def _reduce(samples, cfg, clip_rate):
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / math.sqrt(len(samples)))
    return FkEstimate(mean=mean, stderr=stderr, n_paths=cfg.n_paths,
                      seed=cfg.seed, clip_rate=clip_rate,
                      reliable=clip_rate <= _CLIP_RATE_LIMIT)


def estimate(op, f, x, s, t, cfg):
    """Monte Carlo estimate of (G(t,s)f)(x).

    f is an Expr in the state variables or a callable taking the list
    of endpoint coordinate arrays.
    """
    X, w, clip_rate = _simulate(op, x, s, t, cfg)
    if isinstance(f, Expr):
        fvals = np.broadcast_to(
            np.asarray(evaluate(f, t, X), dtype=float), w.shape)
    else:
        fvals = np.broadcast_to(np.asarray(f(X), dtype=float), w.shape)
    return _reduce(w * fvals, cfg, clip_rate)


def tail_mass_mc(op, x, s, t, R, cfg):
    """Estimate of the kernel mass outside the Euclidean ball of
    radius R, E[W 1{|X_t| > R}]."""
    X, w, clip_rate = _simulate(op, x, s, t, cfg)
    rad = np.sqrt(sum(xi ** 2 for xi in X))
    return _reduce(w * (rad > R), cfg, clip_rate)
