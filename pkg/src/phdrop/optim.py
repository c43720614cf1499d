"""Overfitting trainers for both field families, and a finite-difference gradient check.

Gradients come from torch autograd; Adam updates from ``torch.optim.Adam``.
Training runs in float32 on one thread and is bitwise repeatable for a
fixed seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import _rng
from .fields.encoding import EncodingConfig
from .fields.mlp import MlpFieldParams, init_mlp, render_rays
from .fields.splats import SplatFieldParams, init_splats, random_splat_arrays, rasterize

LOSS_KINDS = ("l2",)


class TrainingDiverged(RuntimeError):
    """The training loss or a parameter became NaN or infinite."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration}: loss = {loss}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``lr=None`` picks the family default (5e-3 for MLPs, 1e-2 for splats).
    Learning rates follow a cosine decay down to ``lr_final_frac`` of the
    initial value. Pruning respawns splats whose opacity is below
    ``prune_threshold`` every ``prune_period`` steps, up to the fraction
    ``prune_until`` of the run.
    """

    iterations: int = 2000
    batch_rays: int = 1024
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    prune_threshold: float = 0.005
    prune_period: int = 100
    prune_until: float = 0.75
    lr_final_frac: float = 0.01
    loss: str = "l2"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.prune_threshold < 0.1:
            raise ValueError("prune threshold must lie in [0, 0.1)")
        if self.batch_rays < 1 or self.prune_period < 1:
            raise ValueError("batch size and prune period must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    psnrs: list[float] = field(default_factory=list)
    final_psnr: float = float("nan")

    def record(self, iteration: int, loss: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("log iterations must increase")
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.psnrs.append(loss_psnr(loss))

    def smoothed(self, window: int = 100) -> np.ndarray:
        loss = np.asarray(self.losses)
        w = min(window, len(loss))
        return np.convolve(loss, np.ones(w) / w, mode="valid")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss", "psnr"])
            for row in zip(self.iterations, self.losses, self.psnrs):
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.record(int(row["iter"]), float(row["loss"]))
        return log


def loss_psnr(mse: float) -> float:
    return 99.0 if mse <= 0 else min(99.0, -10.0 * math.log10(mse))


def _check_finite(loss: torch.Tensor, iteration: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(iteration, value)
    return value


def _check_params(tensors: dict, iteration: int, loss: float) -> None:
    if not all(bool(torch.isfinite(t).all()) for t in tensors.values()):
        raise TrainingDiverged(iteration, loss)


def _train_pixels(dataset):
    if not dataset.train:
        raise ValueError("dataset has no train views")
    dirs = np.stack([v.camera.ray_directions() for v in dataset.train])  # (V, P, 3)
    origins = np.array([v.camera.position for v in dataset.train])
    colors = np.stack([v.image.reshape(-1, 3) for v in dataset.train])
    return origins, dirs, colors


def render_train_psnr(model, dataset) -> float:
    """PSNR over every pixel and channel of every train view."""
    sq, n = 0.0, 0
    for view in dataset.train:
        err = model.render(view.camera).astype(np.float64) - view.image
        sq += float(np.sum(err * err))
        n += err.size
    return loss_psnr(sq / n)


def train_mlp(dataset, encoding: EncodingConfig, config: TrainConfig = TrainConfig(), *,
              width: int = 128, depth: int = 4, dropout_layer: int = 1, n_samples: int = 48,
              bound: float | None = None, init: MlpFieldParams | None = None):
    """Fit an encoded MLP to the train views with random ray batches.

    Returns ``(params, log)``. Each step draws ``config.batch_rays`` pixels
    uniformly over all train views from a stream keyed by the seed.
    """
    origins, dirs, colors = _train_pixels(dataset)
    n_views, n_pix = dirs.shape[:2]
    bound = dataset.spec.bound if bound is None else bound
    model = init if init is not None else init_mlp(
        encoding, width, depth, config.seed, dropout_layer=dropout_layer, bound=bound,
        background=dataset.spec.background, n_samples=n_samples)
    tensors = model.tensors(requires_grad=True)
    base = config.lr or 5e-3
    opt = torch.optim.Adam(tensors.values(), lr=base, betas=config.betas, eps=config.adam_eps)
    rng = _rng.generator("train-mlp", config.seed)
    log = TrainLog()
    for it in range(1, config.iterations + 1):
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(base, config.lr_final_frac, it - 1, config.iterations)
        flat = rng.integers(0, n_views * n_pix, config.batch_rays)
        vi, pi = np.divmod(flat, n_pix)
        key = _rng.derive_key("train-jitter", config.seed, it)
        pred = render_rays(model, tensors, origins[vi], dirs[vi, pi], flat, key)
        loss = torch.mean((pred - torch.as_tensor(colors[vi, pi])) ** 2)
        value = _check_finite(loss, it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _check_params(tensors, it, value)
        log.record(it, value)
    model = model.with_tensors(tensors)
    log.final_psnr = render_train_psnr(model, dataset)
    return model, log


def _cosine_lr(base: float, frac: float, it: int, total: int) -> float:
    return base * (frac + (1.0 - frac) * 0.5 * (1.0 + math.cos(math.pi * it / total)))


SPLAT_LR_SCALE = {"centers": 0.1, "log_scales": 1.0, "color_logits": 2.0, "opacity_logits": 5.0}


def prune_and_respawn(params: SplatFieldParams, threshold: float, rng: np.random.Generator,
                      scale: float = 0.04, opacity: float = 0.1) -> tuple[SplatFieldParams, np.ndarray]:
    """Re-sample splats whose opacity is below ``threshold``; the count never changes.

    Returns the new parameters and the indices that were respawned.
    """
    idx = np.flatnonzero(params.opacities() < threshold)
    if len(idx) == 0:
        return params, idx
    fresh = random_splat_arrays(rng, len(idx), params.bound, scale, opacity)
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    for (name, arr), new in zip(arrays.items(), fresh):
        arr[idx] = new
    return SplatFieldParams(**arrays, bound=params.bound, background=params.background), idx


def train_splats(dataset, n_splats: int = 4096, config: TrainConfig = TrainConfig(), *,
                 bound: float | None = None, init_scale: float = 0.04, init_opacity: float = 0.1):
    """Fit isotropic splats with one full train view per step.

    Returns ``(params, log)``.
    """
    if not dataset.train:
        raise ValueError("dataset has no train views")
    bound = dataset.spec.bound if bound is None else bound
    model = init_splats(n_splats, bound, config.seed, background=dataset.spec.background,
                        scale=init_scale, opacity=init_opacity)
    tensors = model.tensors(requires_grad=True)
    base = config.lr or 1e-2
    opt = torch.optim.Adam([{"params": [t], "lr": base * SPLAT_LR_SCALE[k], "scale": SPLAT_LR_SCALE[k]}
                            for k, t in tensors.items()], betas=config.betas, eps=config.adam_eps)
    rng = _rng.generator("train-splats", config.seed)
    respawn_rng = _rng.generator("respawn", config.seed)
    targets = [torch.as_tensor(v.image) for v in dataset.train]
    log = TrainLog()
    prune_stop = int(config.prune_until * config.iterations)
    for it in range(1, config.iterations + 1):
        lr = _cosine_lr(base, config.lr_final_frac, it - 1, config.iterations)
        for group in opt.param_groups:
            group["lr"] = lr * group["scale"]
        v = int(rng.integers(len(dataset.train)))
        pred = rasterize(model, tensors, dataset.train[v].camera)
        loss = torch.mean((pred - targets[v]) ** 2)
        value = _check_finite(loss, it)
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:  # no splat covers the view: nothing to update
            loss.backward()
            opt.step()
            _check_params(tensors, it, value)
        log.record(it, value)
        if it % config.prune_period == 0 and it <= prune_stop and config.prune_threshold > 0:
            current = model.with_tensors(tensors)
            pruned, idx = prune_and_respawn(current, config.prune_threshold, respawn_rng,
                                            init_scale, init_opacity)
            if len(idx):
                with torch.no_grad():
                    for k, t in tensors.items():
                        t[idx] = torch.as_tensor(getattr(pruned, k)[idx])
                        state = opt.state.get(t)
                        if state:
                            state["exp_avg"][idx] = 0.0
                            state["exp_avg_sq"][idx] = 0.0
    model = model.with_tensors(tensors)
    log.final_psnr = render_train_psnr(model, dataset)
    return model, log


# ---------------------------------------------------------------------------
# gradient check


def _probe_list(arrays: dict[str, np.ndarray], n: int, rng: np.random.Generator):
    names = list(arrays)
    sizes = np.array([arrays[k].size for k in names])
    flat = rng.choice(int(sizes.sum()), size=min(n, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes) - sizes
    out = []
    for f in flat:
        a = int(np.searchsorted(bounds, f, side="right") - 1)
        out.append((names[a], int(f - bounds[a])))
    return out


def _splat_structure(model: SplatFieldParams, tensors, camera):
    """Pair set and depth order, which the loss is only piecewise smooth in."""
    from .fields.splats import _pairs, _project_t

    with torch.no_grad():
        scales = torch.exp(tensors["log_scales"]).clamp(1.5e-4, model.bound)
        x, y, std, depth = (t.numpy() for t in _project_t(tensors["centers"], scales, camera))
    order = np.argsort(depth, kind="stable")
    rank, pix = _pairs(x, y, std, order[depth[order] > 1e-2], camera.height, camera.width)
    return order.tobytes() + rank.tobytes() + pix.tobytes()


def grad_check(model=None, camera=None, target=None, *, n_probes: int = 32, step: float = 1e-3,
               seed: int = 0, loss: str = "render") -> float:
    """Worst relative error between autograd and central finite differences.

    ``loss="render"`` differentiates the mean squared error of the rendered
    view against ``target``; ``loss="quadratic"`` uses sum(c * (p - 1)^2) over the
    raw parameters with fixed random weights c, bypassing the renderer.
    The finite difference is the Richardson combination of central
    differences at ``step`` and ``step / 2``, so its truncation error is
    fourth order in the step. The relative error of one probe is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-6)``. The rendered loss is only
    piecewise smooth: probes whose finite-difference stencil flips a
    rectifier, changes a splat's 3-sigma footprint or reorders splats in
    depth are redrawn, since a central difference across a kink measures
    the kink rather than the gradient.
    """
    rng = _rng.generator("grad-check", seed)
    tensors = {k: torch.tensor(np.asarray(v), dtype=torch.float64, requires_grad=True)
               for k, v in model.arrays().items()}
    if loss == "quadratic":
        weights = {k: torch.as_tensor(rng.uniform(0.5, 2.0, v.shape)) for k, v in tensors.items()}

        def objective(t):
            return sum((weights[k] * (t[k] - 1.0) ** 2).sum() for k in t)
    elif loss == "render":
        tgt = torch.as_tensor(np.asarray(target, dtype=np.float64).reshape(-1, 3))
        if model.kind == "mlp":
            origin = np.asarray(camera.position)
            dirs = camera.ray_directions()
            ids = np.arange(len(dirs))

            def objective(t):
                return torch.mean((render_rays(model, t, origin, dirs, ids, seed) - tgt) ** 2)

            def structure_of(t):
                pattern = []
                render_rays(model, t, origin, dirs, ids, seed, pattern=pattern)
                return b"".join(pattern)
        else:
            def objective(t):
                return torch.mean((rasterize(model, t, camera).reshape(-1, 3) - tgt) ** 2)

            def structure_of(t):
                return _splat_structure(model, t, camera)
    else:
        raise ValueError(f"unknown grad-check loss {loss!r}")

    objective(tensors).backward()
    grads = {k: t.grad.numpy().ravel() for k, t in tensors.items()}
    base = {k: t.detach().clone() for k, t in tensors.items()}
    structure = None
    if loss == "render":
        with torch.no_grad():
            structure = structure_of(base)

    worst = 0.0
    probes = _probe_list(model.arrays(), n_probes, rng)
    spare = _probe_list(model.arrays(), model.n_params, _rng.generator("grad-check-spare", seed))
    accepted = 0
    queue = probes + [p for p in spare if p not in probes]
    with torch.no_grad():
        for name, i in queue:
            if accepted == len(probes):
                break
            values = []
            ok = True
            for offset in (step, -step, step / 2, -step / 2):
                t = {k: v.clone() for k, v in base.items()}
                t[name].view(-1)[i] += offset
                if structure is not None and structure_of(t) != structure:
                    ok = False
                    break
                values.append(float(objective(t)))
            if not ok:
                continue
            accepted += 1
            # Richardson extrapolation of the h and h/2 central differences cancels the h^2 term
            coarse = (values[0] - values[1]) / (2.0 * step)
            fine = (values[2] - values[3]) / step
            g_fd = (4.0 * fine - coarse) / 3.0
            g_a = float(grads[name][i])
            worst = max(worst, abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-6))
    return worst
