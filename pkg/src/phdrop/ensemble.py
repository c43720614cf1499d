"""Pick, per test view, the render of whichever of two models is less uncertain."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import psnr, ssim
from .phd import PHDConfig, run_phd


class EnsembleError(ValueError):
    """The two models or their inputs cannot be compared."""


@dataclass(frozen=True)
class EnsembleInput:
    """Renders, uncertainty maps and scores of models a and b on shared views."""

    view_ids: tuple[int, ...]
    renders_a: tuple[np.ndarray, ...] = field(repr=False)
    renders_b: tuple[np.ndarray, ...] = field(repr=False)
    zeta_a: tuple[np.ndarray, ...] = field(repr=False)
    zeta_b: tuple[np.ndarray, ...] = field(repr=False)
    ssim_a: tuple[float, ...]
    ssim_b: tuple[float, ...]
    psnr_a: tuple[float, ...] = ()
    psnr_b: tuple[float, ...] = ()

    def __post_init__(self):
        n = len(self.view_ids)
        for name in ("renders_a", "renders_b", "zeta_a", "zeta_b", "ssim_a", "ssim_b"):
            if len(getattr(self, name)) != n:
                raise EnsembleError(f"{name} does not cover every view")
        for za, zb in zip(self.zeta_a, self.zeta_b):
            if np.shape(za) != np.shape(zb):
                raise EnsembleError("uncertainty maps of a and b differ in shape")

    @classmethod
    def from_runs(cls, maps_a, maps_b, renders_a, renders_b, gts) -> "EnsembleInput":
        ids_a = [m.view_id for m in maps_a]
        if ids_a != [m.view_id for m in maps_b]:
            raise EnsembleError("models a and b cover different views")
        return cls(
            tuple(ids_a), tuple(renders_a), tuple(renders_b),
            tuple(m.zeta for m in maps_a), tuple(m.zeta for m in maps_b),
            tuple(ssim(r, g) for r, g in zip(renders_a, gts)),
            tuple(ssim(r, g) for r, g in zip(renders_b, gts)),
            tuple(psnr(r, g) for r, g in zip(renders_a, gts)),
            tuple(psnr(r, g) for r, g in zip(renders_b, gts)),
        )

    def swapped(self) -> "EnsembleInput":
        return EnsembleInput(self.view_ids, self.renders_b, self.renders_a, self.zeta_b, self.zeta_a,
                             self.ssim_b, self.ssim_a, self.psnr_b, self.psnr_a)


def select_views(inp: EnsembleInput) -> list[str]:
    """``"a"`` where mean zeta of a <= mean zeta of b, else ``"b"`` (ties go to a)."""
    return ["a" if float(np.mean(za)) <= float(np.mean(zb)) else "b"
            for za, zb in zip(inp.zeta_a, inp.zeta_b)]


@dataclass(frozen=True)
class EMEResult:
    eme: float
    ssim_a: float
    ssim_b: float
    ssim_selected: float
    psnr_a: float
    psnr_b: float
    psnr_selected: float


def eme(inp: EnsembleInput, choices) -> EMEResult:
    """Mean over views of SSIM(chosen) / max(SSIM_a, SSIM_b)."""
    if len(choices) != len(inp.view_ids):
        raise EnsembleError("need one choice per view")
    ratios, chosen_ssim, chosen_psnr = [], [], []
    for i, c in enumerate(choices):
        sa, sb = inp.ssim_a[i], inp.ssim_b[i]
        best = max(sa, sb)
        if not best > 0:
            raise EnsembleError(f"view {inp.view_ids[i]}: best SSIM {best} is not positive")
        s = sa if c == "a" else sb
        ratios.append(s / best)
        chosen_ssim.append(s)
        if inp.psnr_a:
            chosen_psnr.append(inp.psnr_a[i] if c == "a" else inp.psnr_b[i])
    mean = lambda xs: float(np.mean(xs)) if len(xs) else float("nan")  # noqa: E731
    return EMEResult(mean(ratios), mean(inp.ssim_a), mean(inp.ssim_b), mean(chosen_ssim),
                     mean(inp.psnr_a), mean(inp.psnr_b), mean(chosen_psnr))


def ensemble_report(inp: EnsembleInput, choices, **extra) -> dict:
    res = eme(inp, choices)
    return {**asdict(res), **extra,
            "choices": [{"view": int(v), "pick": c} for v, c in zip(inp.view_ids, choices)]}


def run_ensemble(model_a, model_b, dataset_a, dataset_b=None, config: PHDConfig = PHDConfig(), *,
                 workers: int = 1, out_dir=None, digests=("", "")) -> dict:
    """UQ both models (each gated on its own train views), select per test view, score.

    ``dataset_b`` defaults to ``dataset_a``; both must share scene and test views.
    """
    dataset_b = dataset_a if dataset_b is None else dataset_b
    if model_a.kind != model_b.kind:
        raise EnsembleError(f"model families differ: {model_a.kind} vs {model_b.kind}")
    if dataset_a.spec != dataset_b.spec or dataset_a.resolution != dataset_b.resolution:
        raise EnsembleError("models a and b were trained on different scenes or resolutions")
    if [v.camera for v in dataset_a.test] != [v.camera for v in dataset_b.test]:
        raise EnsembleError("datasets a and b have different test views")
    rep_a, maps_a = run_phd(model_a, dataset_a, config, workers=workers, model_digest=digests[0])
    rep_b, maps_b = run_phd(model_b, dataset_b, config, workers=workers, model_digest=digests[1])
    gts = [v.image for v in dataset_a.test]
    inp = EnsembleInput.from_runs(maps_a, maps_b, [m.render for m in maps_a], [m.render for m in maps_b], gts)
    choices = select_views(inp)
    report = ensemble_report(
        inp, choices,
        r_drop_a=rep_a.r_drop, r_drop_b=rep_b.r_drop,
        sigma_max_mean_a=rep_a.sigma_max_mean, sigma_max_mean_b=rep_b.sigma_max_mean,
        mean_zeta_a=[float(np.mean(z)) for z in inp.zeta_a],
        mean_zeta_b=[float(np.mean(z)) for z in inp.zeta_b],
        model_digest_a=digests[0], model_digest_b=digests[1],
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ensemble.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
