"""Isotropic 3D Gaussian splats with depth-sorted alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .. import _rng
from .mask import DropoutMask, MaskError

MIN_SCALE = 1.5e-4
NEAR_PLANE = 1e-2
CUTOFF_SIGMAS = 3.0


@dataclass(frozen=True)
class SplatFieldParams:
    """Splat parameters in their unconstrained (trainable) form."""

    centers: np.ndarray = field(repr=False)  # (N, 3) world units
    log_scales: np.ndarray = field(repr=False)  # (N,)
    color_logits: np.ndarray = field(repr=False)  # (N, 3)
    opacity_logits: np.ndarray = field(repr=False)  # (N,)
    bound: float = 1.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    kind = "splats"
    mask_target = "splats"

    def __post_init__(self):
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        n = len(self.centers)
        if n < 1:
            raise ValueError("a splat field needs at least one splat")
        shapes = {"centers": (n, 3), "log_scales": (n,), "color_logits": (n, 3), "opacity_logits": (n,)}
        for name, shape in shapes.items():
            a = getattr(self, name)
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.isfinite(a).all():
                raise ValueError(f"{name} must be finite")

    @property
    def n_units(self) -> int:
        return len(self.centers)

    @property
    def n_params(self) -> int:
        return 8 * len(self.centers)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"centers": self.centers, "log_scales": self.log_scales,
                "color_logits": self.color_logits, "opacity_logits": self.opacity_logits}

    def tensors(self, dtype=torch.float32, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {k: torch.tensor(np.asarray(v), dtype=dtype, requires_grad=requires_grad)
                for k, v in self.arrays().items()}

    def with_tensors(self, tensors: dict[str, torch.Tensor]) -> "SplatFieldParams":
        arr = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in tensors.items()}
        return replace(self, **arr)

    def scales(self) -> np.ndarray:
        return np.clip(np.exp(self.log_scales.astype(np.float64)), MIN_SCALE, self.bound)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def keep_array(self, mask: DropoutMask | None) -> np.ndarray | None:
        if mask is None:
            return None
        if mask.target != self.mask_target or mask.n_units != self.n_units:
            raise MaskError(f"mask for {mask.target} with {mask.n_units} units does not fit "
                            f"splats with {self.n_units} units")
        return mask.keep()

    def render(self, camera, mask: DropoutMask | None = None, key: int = 0,
               pixels: np.ndarray | None = None) -> np.ndarray:
        """Render a view (H, W, 3); ``key`` is unused since rasterisation is deterministic."""
        with torch.no_grad():
            img = rasterize(self, self.tensors(), camera, self.keep_array(mask)).numpy()
        if pixels is None:
            return img
        return img.reshape(-1, 3)[np.asarray(pixels)]


def init_splats(n: int, bound: float = 1.5, seed: int = 0, *, background=(1.0, 1.0, 1.0),
                scale: float = 0.04, opacity: float = 0.1) -> SplatFieldParams:
    """Splats uniform in the bounding ball with random colors."""
    rng = _rng.generator("splat-init", seed)
    return SplatFieldParams(*random_splat_arrays(rng, n, bound, scale, opacity), bound=bound,
                            background=background)


def random_splat_arrays(rng: np.random.Generator, n: int, bound: float, scale: float, opacity: float):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = bound * rng.random(n) ** (1.0 / 3.0)
    centers = (v * r[:, None]).astype(np.float32)
    log_scales = np.full(n, np.log(scale), dtype=np.float32)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    color_logits = np.log(colors / (1.0 - colors)).astype(np.float32)
    opacity_logits = np.full(n, np.log(opacity / (1.0 - opacity)), dtype=np.float32)
    return centers, log_scales, color_logits, opacity_logits


@dataclass(frozen=True)
class Projection:
    center_px: np.ndarray  # (N, 2) as (x, y) in pixel units, pixel (i, j) centred at (j+.5, i+.5)
    std_px: np.ndarray
    depth: np.ndarray
    cull: np.ndarray


def _project_t(centers: torch.Tensor, scales: torch.Tensor, camera):
    right, up, forward = (torch.as_tensor(v, dtype=centers.dtype) for v in camera.basis())
    rel = centers - torch.as_tensor(camera.position, dtype=centers.dtype)
    depth = rel @ forward
    safe = torch.where(depth > NEAR_PLANE, depth, torch.ones_like(depth))
    f = camera.focal_px
    x = 0.5 * camera.width + f * (rel @ right) / safe
    y = 0.5 * camera.height - f * (rel @ up) / safe
    std = scales * f / safe
    return x, y, std, depth


def project_splat(centers, scales, camera) -> Projection:
    """Pinhole projection of splat centres; screen std = scale * focal / depth."""
    c = torch.as_tensor(np.atleast_2d(np.asarray(centers, dtype=np.float64)))
    s = torch.as_tensor(np.atleast_1d(np.asarray(scales, dtype=np.float64)))
    x, y, std, depth = _project_t(c, s, camera)
    cull = (depth <= NEAR_PLANE).numpy()
    return Projection(torch.stack([x, y], dim=1).numpy(), std.numpy(), depth.numpy(), cull)


def _pairs(x: np.ndarray, y: np.ndarray, std: np.ndarray, order: np.ndarray, height: int, width: int):
    """(splat, pixel) pairs whose pixel centre lies within 3 sigma, for splats in ``order``."""
    r = CUTOFF_SIGMAS * std[order]
    xs, ys = x[order], y[order]
    j0 = np.clip(np.ceil(xs - r - 0.5), 0, width).astype(np.int64)
    j1 = np.clip(np.floor(xs + r - 0.5), -1, width - 1).astype(np.int64)
    i0 = np.clip(np.ceil(ys - r - 0.5), 0, height).astype(np.int64)
    i1 = np.clip(np.floor(ys + r - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    jj = j0[rank] + local % nx[rank]
    ii = i0[rank] + local // nx[rank]
    d2 = (jj + 0.5 - xs[rank]) ** 2 + (ii + 0.5 - ys[rank]) ** 2
    inside = d2 <= r[rank] ** 2
    return rank[inside], (ii * width + jj)[inside]


def rasterize(params: SplatFieldParams, tensors: dict, camera, keep: np.ndarray | None = None) -> torch.Tensor:
    """Differentiable render of an (H, W, 3) image.

    Surviving splats are depth sorted once per view; each pixel then
    composites its splats front to back,
    C = sum_i c_i a_i prod_{j<i} (1 - a_j) + background * prod_j (1 - a_j),
    with a_i = opacity_i * exp(-d^2 / (2 sigma_i^2)) truncated at 3 sigma.
    Dropped splats are removed outright; survivors are not reweighted.
    """
    dtype = tensors["centers"].dtype
    h, w = camera.height, camera.width
    n_pix = h * w
    bg = torch.as_tensor(params.background, dtype=dtype)
    scales = torch.exp(tensors["log_scales"]).clamp(MIN_SCALE, params.bound)
    x, y, std, depth = _project_t(tensors["centers"], scales, camera)
    with torch.no_grad():
        xn, yn, sn, dn = (t.detach().cpu().numpy().astype(np.float64) for t in (x, y, std, depth))
        alive = dn > NEAR_PLANE
        if keep is not None:
            alive &= keep
        idx = np.flatnonzero(alive)
        # front-to-back order of the whole view; ties resolved by splat index
        order = idx[np.argsort(dn[idx], kind="stable")]
        rank, pix = _pairs(xn, yn, sn, order, h, w)
    if len(rank) == 0:
        return bg.expand(h, w, 3).clone()
    # group pairs by pixel, keeping depth order inside each group
    by_pixel = np.lexsort((rank, pix))
    rank, pix = rank[by_pixel], pix[by_pixel]
    counts = np.bincount(pix, minlength=n_pix)
    k_max = int(counts.max())
    slot = np.arange(len(pix)) - (np.cumsum(counts) - counts)[pix]
    flat = torch.as_tensor(pix * k_max + slot)
    sid = torch.as_tensor(order[rank])

    px = torch.as_tensor((pix % w) + 0.5, dtype=dtype)
    py = torch.as_tensor((pix // w) + 0.5, dtype=dtype)
    d2 = (px - x[sid]) ** 2 + (py - y[sid]) ** 2
    opacity = torch.sigmoid(tensors["opacity_logits"])
    alpha = opacity[sid] * torch.exp(-d2 / (2.0 * std[sid] ** 2))
    color = torch.sigmoid(tensors["color_logits"])[sid]

    alpha_pad = torch.zeros(n_pix * k_max, dtype=dtype).index_put((flat,), alpha).view(n_pix, k_max)
    color_pad = torch.zeros(n_pix * k_max, 3, dtype=dtype).index_put((flat,), color).view(n_pix, k_max, 3)
    trans = torch.cumprod(1.0 - alpha_pad, dim=1)
    before = torch.cat([torch.ones(n_pix, 1, dtype=dtype), trans[:, :-1]], dim=1)
    rgb = ((before * alpha_pad)[..., None] * color_pad).sum(dim=1) + trans[:, -1:] * bg
    return rgb.view(h, w, 3)


def render_view_splats(params: SplatFieldParams, camera, mask: DropoutMask | None = None) -> np.ndarray:
    return params.render(camera, mask)
