"""Model-tag dispatch and the train -> UQ -> evaluate chain used by the CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .fields.encoding import EncodingConfig
from .metrics import DegenerateInputError, correlation_report, psnr, spearman, ssim
from .optim import TrainConfig, train_mlp, train_splats

MODEL_TAGS = ("nerf-pe", "nerf-spe", "nerf-hash", "gs3d")
CSV_FIELDS = ("scene", "model", "n_train", "r_drop", "sigma_max_mean", "psnr", "ssim",
              "rho_s", "rho_p", "ause_rmse", "ause_mse", "ause_mae")


@dataclass(frozen=True)
class ModelSettings:
    """Architecture knobs for each family; defaults are the library defaults."""

    width: int = 128
    depth: int = 4
    dropout_layer: int = 1
    n_samples: int = 48
    n_freqs: int = 6
    log2_table_size: int = 10
    n_splats: int = 4096

    def to_dict(self) -> dict:
        return asdict(self)


def encoding_for(tag: str, settings: ModelSettings) -> EncodingConfig:
    kind = tag.split("-", 1)[1]
    return EncodingConfig(kind, n_freqs=settings.n_freqs, log2_table_size=settings.log2_table_size)


def train_model(tag: str, dataset, config: TrainConfig, settings: ModelSettings = ModelSettings()):
    """Train the family named by ``tag``; returns ``(model, log)``."""
    if tag not in MODEL_TAGS:
        raise ValueError(f"unknown model tag {tag!r}; choose from {', '.join(MODEL_TAGS)}")
    if tag == "gs3d":
        return train_splats(dataset, settings.n_splats, config)
    return train_mlp(dataset, encoding_for(tag, settings), config, width=settings.width, depth=settings.depth,
                     dropout_layer=settings.dropout_layer, n_samples=settings.n_samples)


def evaluate(report, maps, dataset, *, scene: str = "", model: str = "", error_source: str = "mean",
             cap: int = 1_000_000, seed: int = 0) -> dict:
    """Metric bundle of one UQ run against the test ground truth.

    ``error_source="mean"`` pairs zeta with the ensemble-mean error,
    ``"render"`` with the unmasked-render error. PSNR and SSIM are those
    of the unmasked render, averaged over test views.
    """
    gts = [dataset.test[m.view_id].image for m in maps]
    if error_source == "mean":
        renders = [m.mean for m in maps]
    elif error_source == "render":
        renders = [m.render for m in maps]
    else:
        raise ValueError(f"unknown error source {error_source!r}")
    corr = correlation_report(maps, gts, renders=renders, cap=cap, seed=seed)
    plain = [m.render if m.render is not None else m.mean for m in maps]
    return {
        "scene": scene, "model": model, "n_train": report.n_train, "r_drop": report.r_drop,
        "sigma_max_mean": report.sigma_max_mean,
        "psnr": float(np.mean([psnr(r, g) for r, g in zip(plain, gts)])),
        "ssim": float(np.mean([ssim(r, g) for r, g in zip(plain, gts)])),
        **{k: v for k, v in corr.to_dict().items()},
        "psnr_ensemble_mean": report.psnr_ensemble_mean,
        "error_source": error_source,
    }


def monotone_pattern(values) -> str:
    """Signs of successive differences: ``+`` up, ``-`` down, ``=`` tie."""
    return "".join("+" if b > a else "-" if b < a else "=" for a, b in zip(values, values[1:]))


def trend(n_train, values) -> float | None:
    """Spearman of ``values`` against the view counts; ``None`` when undefined."""
    if len(values) < 2:
        return None
    try:
        return spearman(np.asarray(values, dtype=np.float64), np.asarray(n_train, dtype=np.float64))
    except DegenerateInputError:
        return None


def summarize_family(rows: list[dict]) -> dict:
    """rho_U and rho_R of one (scene, family) over its successful cells, plus raw patterns."""
    ok = sorted((r for r in rows if "error" not in r), key=lambda r: r["n_train"])
    views = [r["n_train"] for r in ok]
    r_drop = [r["r_drop"] for r in ok]
    sigma = [r["sigma_max_mean"] for r in ok]
    return {
        "n_train": views,
        "rho_U": trend(views, sigma),
        "rho_R": trend(views, r_drop),
        "r_drop_pattern": monotone_pattern(r_drop),
        "sigma_max_pattern": monotone_pattern(sigma),
        "failed": [r["n_train"] for r in rows if "error" in r],
    }
