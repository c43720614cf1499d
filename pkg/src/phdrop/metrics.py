"""Image-fidelity and uncertainty-quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import _rng

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
AUSE_STEPS = 100
AUSE_KINDS = ("rmse", "mse", "mae")


class DegenerateInputError(ValueError):
    """The statistic is undefined for this input (ties, zero variance, empty pool)."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def error_map(render, gt) -> np.ndarray:
    """Per pixel-channel absolute error."""
    r, g = _pair(render, gt)
    return np.abs(r - g)


def psnr(render, gt) -> float:
    """10 log10(1 / MSE) for peak 1; identical images give the cap 99.0."""
    r, g = _pair(render, gt)
    mse = float(np.mean((r - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(render, gt) -> float:
    """Mean structural similarity over all valid window positions, averaged over channels.

    Local statistics use an 11x11 Gaussian window (sigma 1.5) with
    C1 = 0.01^2 and C2 = 0.03^2 for a unit dynamic range.
    """
    a, b = _pair(render, gt)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        var_x = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
        var_y = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
        cov = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass(frozen=True)
class PairedSamples:
    uncertainty: np.ndarray = field(repr=False)
    error: np.ndarray = field(repr=False)
    source: str = ""

    def __post_init__(self):
        u = np.asarray(self.uncertainty, dtype=np.float64).ravel()
        e = np.asarray(self.error, dtype=np.float64).ravel()
        if u.shape != e.shape:
            raise ValueError("uncertainty and error lists differ in length")
        if u.size < 2:
            raise ValueError("need at least two paired samples")
        if not (np.isfinite(u).all() and np.isfinite(e).all()):
            raise ValueError("paired samples must be finite")
        object.__setattr__(self, "uncertainty", u)
        object.__setattr__(self, "error", e)

    def __len__(self) -> int:
        return self.uncertainty.size


def _as_samples(samples, error=None) -> PairedSamples:
    if isinstance(samples, PairedSamples):
        return samples
    return PairedSamples(samples, error)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    mean_rank = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1 .. ends
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation is undefined for a constant list")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def pearson(samples, error=None) -> float:
    """Product-moment correlation of (uncertainty, error)."""
    s = _as_samples(samples, error)
    return _pearson(s.uncertainty, s.error)


def spearman(samples, error=None) -> float:
    """Pearson correlation of the average ranks."""
    s = _as_samples(samples, error)
    return _pearson(average_ranks(s.uncertainty), average_ranks(s.error))


def sparsification_curve(order: np.ndarray, error: np.ndarray, kind: str) -> np.ndarray:
    """Error statistic of the survivors after removing the first floor(t n) entries of ``order``.

    Evaluated at t = 0, 0.01, ..., 0.99 and not normalised.
    """
    if kind not in AUSE_KINDS:
        raise ValueError(f"unknown AUSE kind {kind!r}")
    vals = error[order] ** 2 if kind in ("rmse", "mse") else np.abs(error[order])
    n = len(vals)
    tail = np.concatenate([np.cumsum(vals[::-1])[::-1], [0.0]])  # tail[i] = sum(vals[i:])
    removed = (np.arange(AUSE_STEPS) * n) // AUSE_STEPS
    stat = tail[removed] / (n - removed)
    return np.sqrt(stat) if kind == "rmse" else stat


def sparsification_curves(samples, kind: str, error=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalised (by-uncertainty, oracle) curves.

    Removal follows descending uncertainty (resp. descending error); ties
    keep index order.
    """
    s = _as_samples(samples, error)
    e = s.error
    if np.all(e == e[0]):
        raise DegenerateInputError("sparsification is undefined when all errors are equal")
    by_u = sparsification_curve(np.argsort(-s.uncertainty, kind="stable"), e, kind)
    oracle = sparsification_curve(np.argsort(-e, kind="stable"), e, kind)
    return by_u / by_u[0], oracle / oracle[0]


def ause(samples, kind: str = "rmse", error=None) -> float:
    """Area between the uncertainty and oracle sparsification curves (mean over the t grid)."""
    by_u, oracle = sparsification_curves(samples, kind, error)
    return float(np.mean(by_u - oracle))


@dataclass(frozen=True)
class CorrelationReport:
    rho_s: float
    rho_p: float
    ause_rmse: float
    ause_mse: float
    ause_mae: float
    n_pairs: int
    n_pool: int

    def to_dict(self) -> dict:
        return asdict(self)


def pooled_samples(maps, gts, *, renders=None, cap: int = 1_000_000, seed: int = 0) -> PairedSamples:
    """Pool (zeta, |render - gt|) over every pixel and channel of every view.

    ``renders`` defaults to each map's ensemble mean. Pools larger than
    ``cap`` are reduced to a seeded uniform subsample (kept in pool order).
    """
    if len(maps) != len(gts):
        raise ValueError("maps and ground truths are not aligned")
    if not maps:
        raise DegenerateInputError("empty sample pool")
    renders = [m.mean for m in maps] if renders is None else renders
    u = np.concatenate([np.asarray(m.zeta, dtype=np.float64).ravel() for m in maps])
    e = np.concatenate([error_map(r, g).ravel() for r, g in zip(renders, gts)])
    if u.size > cap:
        keep = np.sort(_rng.generator("pool-subsample", seed).choice(u.size, size=cap, replace=False))
        u, e = u[keep], e[keep]
    return PairedSamples(u, e, f"{len(maps)} views")


def correlation_report(maps, gts, *, renders=None, cap: int = 1_000_000, seed: int = 0) -> CorrelationReport:
    s = pooled_samples(maps, gts, renders=renders, cap=cap, seed=seed)
    pool = sum(np.asarray(m.zeta).size for m in maps)
    return CorrelationReport(spearman(s), pearson(s), ause(s, "rmse"), ause(s, "mse"), ause(s, "mae"),
                             len(s), pool)
