"""Post-hoc dropout uncertainty.

A trained field is perturbed at render time by binary masks that zero a
fraction ``r`` of its maskable units (weight entries of one MLP layer, or
whole splats) without rescaling the survivors. The largest ``r`` on a
fixed grid whose mean absolute train-view change stays below ``eps`` is
``r_drop``; the per-pixel standard deviation over fresh masks at
``r_drop`` is the uncertainty map.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .fields.mask import DropoutMask, n_dropped_for
from .imageio16 import write_png16
from .metrics import psnr


class NotProperlyTrainedError(RuntimeError):
    """The smallest dropout ratio already breaks the train-fit gate."""

    def __init__(self, r: float, gap: float, eps: float):
        super().__init__(f"model is not properly trained: train-fit gap {gap:.6g} at r = {r:g} "
                         f"is not below eps = {eps:g}")
        self.r = r
        self.gap = gap
        self.eps = eps


@dataclass(frozen=True)
class PHDConfig:
    """Gate and sampling settings.

    Parameters
    ----------
    eps : float
        Gate on the mean absolute per-pixel-channel train-view change.
    dr : float
        Step of the ratio grid ``dr, 2 dr, ...``.
    n_search, n_est : int
        Masks per grid point during the search, and for the final estimate.
    r_max : float
        Ratio cap; the search stops there even if the gate never binds.
    seed : int
        Root of every mask and jitter stream.
    gate_pixels : int or None
        Evaluate the gate on a seeded subsample of this many train pixels
        (pooled over views). ``None`` uses every pixel.
    """

    eps: float = 0.01
    dr: float = 0.01
    n_search: int = 8
    n_est: int = 32
    r_max: float = 0.99
    seed: int = 0
    gate_pixels: int | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.dr <= self.r_max < 1:
            raise ValueError("need 0 < dr <= r_max < 1")
        if self.n_search < 2 or self.n_est < 2:
            raise ValueError("n_search and n_est must be at least 2")
        if self.gate_pixels is not None and self.gate_pixels < 1:
            raise ValueError("gate_pixels must be positive")

    def grid(self) -> list[float]:
        n = int(np.floor(self.r_max / self.dr + 1e-9))
        return [round(k * self.dr, 12) for k in range(1, n + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


class RenderCounter:
    """Counts renders in full-view equivalents (pixels rendered / pixels per view)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.view_equivalents = 0.0

    def add(self, n_pixels: int, view_pixels: int) -> None:
        with self._lock:
            self.calls += 1
            self.view_equivalents += n_pixels / view_pixels


COUNTER = RenderCounter()


def render(model, camera, mask: DropoutMask | None, key: int, pixels: np.ndarray | None = None) -> np.ndarray:
    """Counted render; an empty pixel subset costs nothing."""
    n_view = camera.height * camera.width
    if pixels is not None and len(pixels) == 0:
        return np.zeros((0, 3), dtype=np.float32)
    # splats rasterise the whole view even when only some pixels are kept
    work = n_view if pixels is None or model.kind == "splats" else len(pixels)
    COUNTER.add(work, n_view)
    return model.render(camera, mask, key, pixels)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _cameras(views):
    return [getattr(v, "camera", v) for v in views]


def sample_mask(model, r: float, mask_key: int) -> DropoutMask:
    """Drop exactly round(r * U) of the model's U units, chosen without replacement."""
    if not 0.0 <= r <= 1.0:
        raise ValueError("dropout ratio must lie in [0, 1]")
    n = model.n_units
    dropped = np.zeros(n, dtype=bool)
    k = n_dropped_for(r, n)
    if k:
        dropped[_rng.generator("mask", mask_key).choice(n, size=k, replace=False)] = True
    return DropoutMask(model.mask_target, dropped, r)


def render_key(seed: int) -> int:
    """Ray-jitter key shared by every render of one run, masked or not."""
    return _rng.derive_key("render", seed)


def gate_pixel_sets(views, n_pixels: int | None, seed: int) -> list[np.ndarray | None]:
    """Per-view flat pixel indices of the pooled gate subsample (``None`` = all)."""
    cams = _cameras(views)
    sizes = [c.height * c.width for c in cams]
    total = sum(sizes)
    if n_pixels is None or n_pixels >= total:
        return [None] * len(cams)
    flat = np.sort(_rng.generator("gate-pixels", seed).choice(total, size=n_pixels, replace=False))
    starts = np.cumsum([0] + sizes)
    return [flat[(flat >= a) & (flat < b)] - a for a, b in zip(starts[:-1], starts[1:])]


class GapEvaluator:
    """Train-fit gap with the unmasked renders computed once and reused."""

    def __init__(self, model, views, *, key: int, pixels=None, workers: int = 1):
        self.model = model
        self.cams = _cameras(views)
        if not self.cams:
            raise ValueError("gap needs at least one view")
        self.key = key
        self.pixels = pixels if pixels is not None else [None] * len(self.cams)
        self.workers = workers
        self.base = _map(lambda i: render(model, self.cams[i], None, key, self.pixels[i]),
                         range(len(self.cams)), workers)
        self.n_values = sum(b.size for b in self.base)

    def gap(self, r: float, n: int, key: int) -> float:
        """(1/n) sum over masks of the mean |unmasked - masked| over all pixels and channels."""
        if n < 1:
            raise ValueError("need at least one mask")
        total = 0.0
        for i in range(n):
            mask = sample_mask(self.model, r, _rng.derive_key(key, i))
            diffs = _map(lambda v: float(np.abs(render(self.model, self.cams[v], mask, self.key, self.pixels[v])
                                                .astype(np.float64) - self.base[v]).sum()),
                         range(len(self.cams)), self.workers)
            total += sum(diffs) / self.n_values
        return total / n


def train_fit_gap(model, views, r: float, n: int, key: int, *, render_seed: int = 0,
                  pixels=None, workers: int = 1) -> float:
    """Mean absolute change of the renders of ``views`` under ``n`` masks of ratio ``r``.

    Mask ``i`` is drawn from ``derive_key(key, i)``; masked and unmasked
    renders share the jitter key of ``render_seed``.
    """
    return GapEvaluator(model, views, key=render_key(render_seed), pixels=pixels, workers=workers).gap(r, n, key)


def search_key(seed: int, step: int) -> int:
    return _rng.derive_key(seed, "search", step)


@dataclass
class SearchResult:
    r_drop: float
    trace: list[tuple[float, float]]  # (r, gap) for every grid point evaluated
    capped: bool


def search_r_drop(model, train_views, config: PHDConfig = PHDConfig(), workers: int = 1) -> SearchResult:
    """Forward sweep over ``dr, 2 dr, ...``: keep the last ratio whose gap is below ``eps``.

    Raises
    ------
    NotProperlyTrainedError
        If the very first grid point fails the gate.
    """
    pixels = gate_pixel_sets(train_views, config.gate_pixels, config.seed)
    ev = GapEvaluator(model, train_views, key=render_key(config.seed), pixels=pixels, workers=workers)
    trace = []
    r_drop = 0.0
    grid = config.grid()
    for k, r in enumerate(grid, start=1):
        g = ev.gap(r, config.n_search, search_key(config.seed, k))
        trace.append((r, g))
        if not g < config.eps:
            if k == 1:
                raise NotProperlyTrainedError(r, g, config.eps)
            return SearchResult(r_drop, trace, False)
        r_drop = r
    return SearchResult(r_drop, trace, True)


def find_r_drop(model, train_views, config: PHDConfig = PHDConfig(), workers: int = 1) -> float:
    return search_r_drop(model, train_views, config, workers).r_drop


@dataclass
class UncertaintyMap:
    view_id: int
    zeta: np.ndarray = field(repr=False)  # (H, W, 3) sample std over masks
    mean: np.ndarray = field(repr=False)  # (H, W, 3) mean masked render
    render: np.ndarray | None = field(default=None, repr=False)  # unmasked render, if kept

    @property
    def sigma_max(self) -> float:
        return float(self.zeta.max())

    @property
    def mean_zeta(self) -> float:
        return float(self.zeta.mean())


def estimate_key(seed: int) -> int:
    return _rng.derive_key(seed, "estimate")


def ensemble_masks(model, r_drop: float, n_est: int, key: int) -> list[DropoutMask]:
    return [sample_mask(model, r_drop, _rng.derive_key(key, j)) for j in range(n_est)]


def zeta_from_renders(renders: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(std with divisor n - 1, mean) over the leading axis, reduced in float64."""
    stack = np.asarray(renders, dtype=np.float64)
    return stack.std(axis=0, ddof=1), stack.mean(axis=0)


def estimate_uncertainty(model, views, r_drop: float, n_est: int, key: int, *, render_seed: int = 0,
                         view_ids=None, workers: int = 1) -> list[UncertaintyMap]:
    """Per-view std and mean over ``n_est`` fresh masks at ratio ``r_drop``.

    Member ``j`` of the ensemble is one mask (from ``derive_key(key, j)``)
    applied to every view. Renders land in fixed slots before reduction,
    so the result does not depend on ``workers``.
    """
    if not r_drop > 0:
        raise ValueError("r_drop must be positive")
    if n_est < 2:
        raise ValueError("n_est must be at least 2")
    cams = _cameras(views)
    ids = list(range(len(cams))) if view_ids is None else list(view_ids)
    masks = ensemble_masks(model, r_drop, n_est, key)
    rkey = render_key(render_seed)
    out = []
    for vid, cam in zip(ids, cams):
        renders = _map(lambda m: render(model, cam, m, rkey), masks, workers)
        zeta, mean = zeta_from_renders(renders)
        out.append(UncertaintyMap(vid, zeta.astype(np.float32), mean.astype(np.float32)))
    return out


def sigma_max_summary(maps) -> tuple[list[float], float]:
    """Per-view max of zeta over (h, w, c), and their mean."""
    if not maps:
        raise ValueError("need at least one uncertainty map")
    per_view = [float(np.max(getattr(m, "zeta", m))) for m in maps]
    return per_view, float(np.mean(per_view))


@dataclass
class UQReport:
    r_drop: float
    eps: float
    dr: float
    n_est: int
    n_search: int
    r_max: float
    seed: int
    gate_pixels: int | None
    sigma_max: list[float]
    sigma_max_mean: float
    zeta_max: float
    search: list[tuple[float, float]]
    capped: bool
    model_digest: str
    model_kind: str
    n_train: int
    psnr_unmasked: float
    psnr_ensemble_mean: float
    view_ids: list[int]
    renders: float = 0.0
    views: list[dict] = field(default_factory=list)
    uq_split: str = "test"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["search"] = [list(p) for p in self.search]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "UQReport":
        d = dict(d)
        d["search"] = [tuple(p) for p in d["search"]]
        return cls(**d)


def _mean_psnr(renders, views) -> float:
    return float(np.mean([psnr(r, v.image) for r, v in zip(renders, views)]))


def run_phd(model, dataset, config: PHDConfig = PHDConfig(), *, out_dir=None, workers: int = 1,
            model_digest: str = "") -> tuple[UQReport, list[UncertaintyMap]]:
    """Gate on the train views, then estimate uncertainty on the test views.

    With ``out_dir`` set, writes ``report.json``, per-view heatmaps
    ``zeta_%04d.png`` (max-over-channel zeta over the report-wide max,
    16-bit gray), ensemble means ``mean_%04d.png`` and the raw arrays
    ``zeta_%04d.npy``, ``mean_%04d.npy`` and ``render_%04d.npy`` (unmasked).
    """
    if not dataset.train or not dataset.test:
        raise ValueError("dataset needs train and test views")
    start = COUNTER.view_equivalents
    result = search_r_drop(model, dataset.train, config, workers)
    maps = estimate_uncertainty(model, dataset.test, result.r_drop, config.n_est, estimate_key(config.seed),
                                render_seed=config.seed, workers=workers)
    rkey = render_key(config.seed)
    plain = _map(lambda v: render(model, v.camera, None, rkey), dataset.test, workers)
    for m, img in zip(maps, plain):
        m.render = img
    per_view, mean_sigma = sigma_max_summary(maps)
    report = UQReport(
        r_drop=result.r_drop, eps=config.eps, dr=config.dr, n_est=config.n_est, n_search=config.n_search,
        r_max=config.r_max, seed=config.seed, gate_pixels=config.gate_pixels,
        sigma_max=per_view, sigma_max_mean=mean_sigma, zeta_max=max(per_view),
        search=result.trace, capped=result.capped, model_digest=model_digest, model_kind=model.kind,
        n_train=dataset.n_train,
        psnr_unmasked=_mean_psnr(plain, dataset.test),
        psnr_ensemble_mean=_mean_psnr([m.mean for m in maps], dataset.test),
        view_ids=[m.view_id for m in maps],
        renders=COUNTER.view_equivalents - start,
    )
    if out_dir is not None:
        write_report(report, maps, out_dir)
    return report, maps


def write_report(report: UQReport, maps, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    top = report.zeta_max
    report.views = []
    for m in maps:
        zpng, mpng = f"zeta_{m.view_id:04d}.png", f"mean_{m.view_id:04d}.png"
        heat = m.zeta.max(axis=2) / top if top > 0 else np.zeros(m.zeta.shape[:2])
        write_png16(out / zpng, heat)
        write_png16(out / mpng, m.mean)
        np.save(out / f"zeta_{m.view_id:04d}.npy", m.zeta)
        np.save(out / f"mean_{m.view_id:04d}.npy", m.mean)
        entry = {"id": m.view_id, "zeta_png": zpng, "mean_png": mpng,
                 "zeta_npy": f"zeta_{m.view_id:04d}.npy", "mean_npy": f"mean_{m.view_id:04d}.npy"}
        if m.render is not None:
            np.save(out / f"render_{m.view_id:04d}.npy", m.render)
            entry["render_npy"] = f"render_{m.view_id:04d}.npy"
        report.views.append(entry)
    (out / "report.json").write_text(report.to_json())
    return out / "report.json"


def load_report(directory) -> tuple[UQReport, list[UncertaintyMap]]:
    d = Path(directory)
    report = UQReport.from_dict(json.loads((d / "report.json").read_text()))
    maps = [UncertaintyMap(v["id"], np.load(d / v["zeta_npy"]), np.load(d / v["mean_npy"]),
                           np.load(d / v["render_npy"]) if "render_npy" in v else None)
            for v in report.views]
    return report, maps
