"""Rays, stratified sampling and volume compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .._rng import counter_uniform


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit norm")
        if not 0.0 <= self.near < self.far:
            raise ValueError("ray interval must satisfy 0 <= near < far")


def sphere_bounds(origins: np.ndarray, dirs: np.ndarray, radius: float):
    """Entry/exit distances of rays through the origin-centred sphere.

    Returns ``(near, far, hit)``; ``near`` is clamped at 0 for origins
    inside the sphere.
    """
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    b = np.sum(o * dirs, axis=1)
    c = np.sum(o * o, axis=1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - sq, 0.0)
    far = -b + sq
    hit &= far > near
    return near, far, hit


def stratified_samples(near: np.ndarray, far: np.ndarray, n_samples: int, ray_ids: np.ndarray,
                       key: int) -> tuple[np.ndarray, np.ndarray]:
    """Jittered sample distances and interval lengths, shape (N, n_samples).

    The jitter of sample ``i`` on ray ``r`` depends only on ``(key, r, i)``.
    The last interval runs to ``far``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    ids = np.asarray(ray_ids, dtype=np.uint64)
    counters = ids[:, None] * np.uint64(n_samples) + np.arange(n_samples, dtype=np.uint64)[None, :]
    u = counter_uniform(key, counters)
    span = (far - near)[:, None]
    t = near[:, None] + (np.arange(n_samples)[None, :] + u) / n_samples * span
    deltas = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    return t, deltas


def composite(sigma_delta: torch.Tensor, rgb: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_final * background."""
    alpha = 1.0 - torch.exp(-sigma_delta)
    acc = torch.cumsum(sigma_delta, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    weights = trans * alpha
    t_final = torch.exp(-acc[..., -1:])
    return (weights[..., None] * rgb).sum(dim=-2) + t_final * background


def volume_composite(sigma_delta, rgb, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """NumPy front end of :func:`composite` for hand-checkable cases."""
    sd = torch.as_tensor(np.asarray(sigma_delta, dtype=np.float64))
    c = torch.as_tensor(np.asarray(rgb, dtype=np.float64))
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64))
    return composite(sd, c, bg).numpy()


def pixel_rays(camera) -> tuple[np.ndarray, np.ndarray]:
    """(origin (3,), unit directions (H*W, 3)) for every pixel center."""
    return np.asarray(camera.position, dtype=np.float64), camera.ray_directions()


def ray_from_pixel(camera, i: int, j: int, bound: float) -> Ray:
    d = camera.ray_directions()[i * camera.width + j]
    o = np.asarray(camera.position)
    near, far, hit = sphere_bounds(o, d[None, :], bound)
    if not hit[0]:
        raise ValueError("pixel ray misses the scene bounds")
    return Ray(tuple(o), tuple(d), float(near[0]), float(far[0]))
