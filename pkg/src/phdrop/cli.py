"""Command-line entry point: ``phdrop <command> [flags]``.

Exit codes: 0 success, 1 every sweep cell failed, 2 invalid flags or
incompatible inputs, 3 I/O failure, 4 training diverged, 5 model not
properly trained for the dropout gate.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .ensemble import EnsembleError, run_ensemble
from .fields.checkpoint import load_checkpoint, save_checkpoint
from .optim import TrainConfig, TrainingDiverged
from .phd import NotProperlyTrainedError, PHDConfig, load_report, run_phd
from .pipeline import CSV_FIELDS, MODEL_TAGS, ModelSettings, evaluate, summarize_family, train_model
from .scene import SCENE_KINDS, SceneSpec, load_dataset, make_dataset, save_dataset

EXIT_OK, EXIT_ALL_FAILED, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_UNTRAINED = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_digests(path) -> dict[str, str]:
    """SHA-256 of a file, or of every file below a directory (relative names)."""
    path = Path(path)
    if path.is_file():
        return {path.name: file_digest(path)}
    return {str(p.relative_to(path)): file_digest(p) for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {name: tree_digests(p) for name, p in inputs.items()},
        "outputs": tree_digests(out),
        "tool_version": __version__,
        "python": platform.python_version(),
        "duration_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def verify_manifest(out) -> bool:
    """True when every recorded output digest matches the files on disk."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    return manifest["outputs"] == tree_digests(out)


# ---------------------------------------------------------------------------
# flag helpers


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("PHD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"PHD_SEED must be an integer, got {env!r}") from None


def _positive(name: str, value, allow_zero: bool = False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        raise UsageError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def _int_list(name: str, text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name} expects a comma-separated list of integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise UsageError(f"{name} values must be positive")
    return values


def _range(name: str, text: str | None, n: int) -> list[int]:
    if text is None:
        return list(range(n))
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"{name} expects START:STOP, got {text!r}") from None
    if not 0 <= a < b <= n:
        raise UsageError(f"{name} range {text} is outside the {n} train views")
    return list(range(a, b))


def add_phd_flags(p: argparse.ArgumentParser) -> None:
    d = PHDConfig()
    p.add_argument("--eps", type=float, default=d.eps, help="train-fit gate (mean abs per pixel-channel)")
    p.add_argument("--dr", type=float, default=d.dr, help="dropout ratio grid step")
    p.add_argument("--n", type=int, default=d.n_est, help="masks for the uncertainty estimate")
    p.add_argument("--n-search", type=int, default=d.n_search, help="masks per grid point in the search")
    p.add_argument("--r-max", type=float, default=d.r_max, help="dropout ratio cap")
    p.add_argument("--gate-pixels", type=int, default=None, help="subsample the gate to this many train pixels")


def phd_config(args, seed: int) -> PHDConfig:
    try:
        return PHDConfig(eps=args.eps, dr=args.dr, n_search=args.n_search, n_est=args.n, r_max=args.r_max,
                         seed=seed, gate_pixels=args.gate_pixels)
    except ValueError as exc:
        raise UsageError(f"invalid UQ flags: {exc}") from None


def add_train_flags(p: argparse.ArgumentParser) -> None:
    d, m = TrainConfig(), ModelSettings()
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--batch", type=int, default=d.batch_rays, help="rays per step (MLP fields)")
    p.add_argument("--lr", type=float, default=None, help="base learning rate (family default if unset)")
    p.add_argument("--prune-threshold", type=float, default=d.prune_threshold)
    p.add_argument("--prune-period", type=int, default=d.prune_period)
    p.add_argument("--width", type=int, default=m.width)
    p.add_argument("--depth", type=int, default=m.depth)
    p.add_argument("--dropout-layer", type=int, default=m.dropout_layer)
    p.add_argument("--samples", type=int, default=m.n_samples, help="ray-march samples per ray")
    p.add_argument("--freqs", type=int, default=m.n_freqs, help="frequency bands L (pe/spe)")
    p.add_argument("--log2-table", type=int, default=m.log2_table_size, help="hash table size exponent")
    p.add_argument("--splats", type=int, default=m.n_splats)


def train_settings(args, seed: int) -> tuple[TrainConfig, ModelSettings]:
    for name in ("iters", "batch", "width", "depth", "samples", "splats", "prune_period"):
        _positive("--" + name.replace("_", "-"), getattr(args, name))
    try:
        cfg = TrainConfig(iterations=args.iters, batch_rays=args.batch, lr=args.lr, seed=seed,
                          prune_threshold=args.prune_threshold, prune_period=args.prune_period)
    except ValueError as exc:
        raise UsageError(f"invalid training flags: {exc}") from None
    settings = ModelSettings(width=args.width, depth=args.depth, dropout_layer=args.dropout_layer,
                             n_samples=args.samples, n_freqs=args.freqs, log2_table_size=args.log2_table,
                             n_splats=args.splats)
    return cfg, settings


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_scene_gen(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    _positive("--views", args.views)
    _positive("--test-views", args.test_views)
    if args.res < 8:
        raise UsageError(f"--res must be at least 8, got {args.res}")
    try:
        spec = SceneSpec(args.scene, count=args.count, seed=seed)
    except ValueError as exc:
        raise UsageError(f"invalid scene flags: {exc}") from None
    ds = make_dataset(spec, args.views, args.test_views, seed, resolution=(args.res, args.res))
    out = _out(args.out)
    save_dataset(ds, out)
    write_manifest(out, "scene-gen", {"scene": spec.to_dict(), "views": args.views, "test_views": args.test_views,
                                      "res": args.res}, {"seed": seed}, {}, started)
    print(f"wrote {args.scene} dataset: {args.views} train + {args.test_views} test views at "
          f"{args.res}x{args.res} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    cfg, settings = train_settings(args, seed)
    ds = load_dataset(args.data)
    model, log = train_model(args.model, ds, cfg, settings)
    out = _out(args.out)
    digest = save_checkpoint(model, out / "model.phdc")
    log.write_csv(out / "train_log.csv")
    summary = {"model": args.model, "final_train_psnr": log.final_psnr, "iterations": cfg.iterations,
               "checkpoint_sha256": digest, "n_train": ds.n_train}
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", {"model": args.model, "train": cfg.to_dict(), "settings": settings.to_dict()},
                   {"seed": seed}, {"data": args.data}, started)
    print(f"trained {args.model}: final train PSNR {log.final_psnr:.2f} dB -> {out / 'model.phdc'}")
    return EXIT_OK


def cmd_uq(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    _positive("--workers", args.workers)
    config = phd_config(args, seed)
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    out = _out(args.out)
    report, _ = run_phd(model, ds, config, out_dir=out, workers=args.workers,
                        model_digest=file_digest(Path(args.ckpt)))
    write_manifest(out, "uq", {"phd": config.to_dict(), "workers": args.workers}, {"seed": seed},
                   {"ckpt": args.ckpt, "data": args.data}, started)
    print(f"r_drop = {report.r_drop:g}, mean sigma_max = {report.sigma_max_mean:.6g} over "
          f"{len(report.sigma_max)} test views -> {out / 'report.json'}")
    return EXIT_OK


def _write_rows(out: Path, stem: str, rows: list[dict]) -> None:
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CSV_FIELDS), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_eval(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    _positive("--cap", args.cap)
    report, maps = load_report(args.uq)
    ds = load_dataset(args.data)
    if any(m.view_id >= len(ds.test) or m.zeta.shape[:2] != ds.resolution for m in maps):
        raise UsageError("UQ report does not match the dataset's test views")
    if args.error_source == "render" and any(m.render is None for m in maps):
        raise UsageError("UQ report has no unmasked renders for --error-source render")
    bundle = evaluate(report, maps, ds, scene=args.scene_name or ds.spec.kind, model=args.model_name or report.model_kind,
                      error_source=args.error_source, cap=args.cap, seed=seed)
    out = _out(args.out)
    (out / "metrics.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    _write_rows(out, "metrics", [bundle])
    write_manifest(out, "eval", {"cap": args.cap, "error_source": args.error_source}, {"seed": seed},
                   {"uq": args.uq, "data": args.data}, started)
    print(f"rho_s = {bundle['rho_s']:.4f}, AUSE(rmse) = {bundle['ause_rmse']:.4f}, "
          f"PSNR = {bundle['psnr']:.2f} dB -> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    _positive("--workers", args.workers)
    config = phd_config(args, seed)
    model_a, model_b = load_checkpoint(args.ckpt_a), load_checkpoint(args.ckpt_b)
    ds_a = load_dataset(args.data)
    ds_b = load_dataset(args.data_b) if args.data_b else ds_a
    ds_b_split = ds_b.subset(_range("--train-b", args.train_b, ds_b.n_train))
    ds_a_split = ds_a.subset(_range("--train-a", args.train_a, ds_a.n_train))
    out = _out(args.out)
    try:
        report = run_ensemble(model_a, model_b, ds_a_split, ds_b_split, config, workers=args.workers, out_dir=out,
                              digests=(file_digest(Path(args.ckpt_a)), file_digest(Path(args.ckpt_b))))
    except EnsembleError as exc:
        raise UsageError(str(exc)) from None
    inputs = {"ckpt_a": args.ckpt_a, "ckpt_b": args.ckpt_b, "data": args.data}
    if args.data_b:
        inputs["data_b"] = args.data_b
    write_manifest(out, "ensemble", {"phd": config.to_dict(), "train_a": args.train_a, "train_b": args.train_b},
                   {"seed": seed}, inputs, started)
    picks = "".join(c["pick"] for c in report["choices"])
    print(f"E_ME = {report['eme']:.4f} (SSIM a {report['ssim_a']:.4f}, b {report['ssim_b']:.4f}, "
          f"selected {report['ssim_selected']:.4f}); picks {picks}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed)
    views = sorted(set(_int_list("--views", args.views)))
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    scenes = [s.strip() for s in args.scenes.split(",") if s.strip()]
    for m in models:
        if m not in MODEL_TAGS:
            raise UsageError(f"--models: unknown model tag {m!r}")
    for s in scenes:
        if s not in SCENE_KINDS:
            raise UsageError(f"--scenes: unknown scene kind {s!r}")
    _positive("--test-views", args.test_views)
    _positive("--workers", args.workers)
    cfg, settings = train_settings(args, seed)
    config = phd_config(args, seed)
    out = _out(args.out)
    rows, families = [], {}
    for scene in scenes:
        full = make_dataset(SceneSpec(scene, seed=seed), max(views), args.test_views, seed,
                            resolution=(args.res, args.res))
        for tag in models:
            cells = []
            for n in views:
                cell_dir = out / scene / tag / f"v{n:03d}"
                ds = full.subset(range(n))
                try:
                    model, log = train_model(tag, ds, cfg, settings)
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(model, cell_dir / "model.phdc")
                    log.write_csv(cell_dir / "train_log.csv")
                    report, maps = run_phd(model, ds, config, out_dir=cell_dir / "uq", workers=args.workers)
                    row = evaluate(report, maps, ds, scene=scene, model=tag, cap=args.cap, seed=seed)
                    row["train_psnr"] = log.final_psnr
                except (TrainingDiverged, NotProperlyTrainedError, ValueError) as exc:
                    row = {"scene": scene, "model": tag, "n_train": n, "error": f"{type(exc).__name__}: {exc}"}
                    print(f"warning: cell {scene}/{tag}/{n} failed: {exc}", file=sys.stderr)
                cells.append(row)
                rows.append(row)
            families[f"{scene}/{tag}"] = summarize_family(cells)
    report = {"views": views, "rows": rows, "families": families}
    (out / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_rows(out, "sweep", [r for r in rows if "error" not in r])
    write_manifest(out, "sweep", {"views": views, "models": models, "scenes": scenes, "train": cfg.to_dict(),
                                  "settings": settings.to_dict(), "phd": config.to_dict(), "res": args.res,
                                  "test_views": args.test_views}, {"seed": seed}, {}, started)
    for name, fam in families.items():
        print(f"{name}: rho_U = {fam['rho_U']}, rho_R = {fam['rho_R']}, r_drop {fam['r_drop_pattern'] or '-'}, "
              f"sigma_max {fam['sigma_max_pattern'] or '-'}")
    if rows and all("error" in r for r in rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits 2; keep the message on one line
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phdrop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"phdrop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scene-gen", help="render a procedural train/test dataset")
    p.add_argument("--scene", choices=SCENE_KINDS, default="spheres")
    p.add_argument("--count", type=int, default=6, help="object count")
    p.add_argument("--views", type=int, default=16, help="train views")
    p.add_argument("--test-views", type=int, default=32)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("train", help="fit a field to a dataset's train views")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=MODEL_TAGS, required=True)
    add_train_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("uq", help="find r_drop and estimate test-view uncertainty")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    add_phd_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("eval", help="correlation, AUSE and fidelity metrics of a UQ report")
    p.add_argument("--uq", required=True, help="directory written by the uq command")
    p.add_argument("--data", required=True)
    p.add_argument("--cap", type=int, default=1_000_000, help="subsample cap for the (zeta, error) pool")
    p.add_argument("--error-source", choices=("mean", "render"), default="mean")
    p.add_argument("--scene-name", default=None)
    p.add_argument("--model-name", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="per-view selection between two models by mean uncertainty")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True, help="dataset of model a (and b unless --data-b)")
    p.add_argument("--data-b", default=None)
    p.add_argument("--train-a", default=None, help="START:STOP train views model a was fit on")
    p.add_argument("--train-b", default=None, help="START:STOP train views model b was fit on")
    add_phd_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("sweep", help="train + UQ + eval over a grid of view counts")
    p.add_argument("--scenes", default="spheres")
    p.add_argument("--models", default="nerf-pe,gs3d")
    p.add_argument("--views", default="8,16,100")
    p.add_argument("--test-views", type=int, default=32)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--cap", type=int, default=1_000_000)
    add_train_flags(p)
    add_phd_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"phdrop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"phdrop {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NotProperlyTrainedError as exc:
        print(f"phdrop {args.command}: {exc}", file=sys.stderr)
        return EXIT_UNTRAINED
    except OSError as exc:
        print(f"phdrop {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
