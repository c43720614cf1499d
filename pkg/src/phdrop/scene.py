"""Procedural ground-truth scenes, cameras and train/test datasets.

Scenes are analytic (spheres on a ground disk, or checker-textured
cubes), so reference views come from an exact ray tracer instead of
photographs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .imageio16 import ImageDecodeError, quantize16, read_png16, write_png16

AMBIENT = 0.2
SCENE_KINDS = ("spheres", "checker-cube")
DEFAULT_LIGHT = (0.4, -0.3, math.sqrt(1.0 - 0.16 - 0.09))


class DatasetError(IOError):
    """Dataset directory is missing, malformed or inconsistent."""


class ManifestError(DatasetError):
    pass


def _normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking from ``position`` at ``target``."""

    position: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_deg: float = 45.0
    height: int = 64
    width: int = 64

    def __post_init__(self):
        for name in ("position", "target", "up"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(x) for x in v):
                raise ValueError(f"camera {name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        if np.linalg.norm(np.subtract(self.position, self.target)) == 0.0:
            raise ValueError("camera position coincides with its target")
        if self.height < 8 or self.width < 8:
            raise ValueError("camera resolution must be at least 8x8")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("field of view must lie in (0, 180) degrees")
        f = _normalize(np.subtract(self.target, self.position))
        if np.linalg.norm(np.cross(f, self.up)) < 1e-9:
            raise ValueError("up hint is parallel to the viewing direction")

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) / 2.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) in world coordinates."""
        forward = _normalize(np.subtract(self.target, self.position))
        right = _normalize(np.cross(forward, self.up))
        up = np.cross(right, forward)
        return right, up, forward

    def ray_directions(self) -> np.ndarray:
        """Unit directions through pixel centers, shape (H*W, 3), row-major."""
        right, up, forward = self.basis()
        f = self.focal_px
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        x = (jj.ravel() + 0.5 - 0.5 * self.width) / f
        y = -(ii.ravel() + 0.5 - 0.5 * self.height) / f
        d = forward[None, :] + x[:, None] * right[None, :] + y[:, None] * up[None, :]
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "target": list(self.target),
            "up": list(self.up),
            "fov_deg": self.fov_deg,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            position=tuple(d["position"]),
            target=tuple(d["target"]),
            up=tuple(d["up"]),
            fov_deg=float(d["fov_deg"]),
            height=int(d["height"]),
            width=int(d["width"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "spheres"
    count: int = 6
    bound: float = 1.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    light: tuple[float, float, float] = DEFAULT_LIGHT
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if not 0 <= self.count <= 16:
            raise ValueError("object count must lie in [0, 16]")
        if self.bound <= 0:
            raise ValueError("bounding radius must be positive")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or not all(0.0 <= c <= 1.0 for c in bg):
            raise ValueError("background color must be a 3-vector in [0, 1]")
        light = tuple(float(c) for c in self.light)
        if len(light) != 3 or abs(math.sqrt(sum(c * c for c in light)) - 1.0) > 1e-6:
            raise ValueError("light direction must be unit norm")
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "light", light)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "count": self.count,
            "bound": self.bound,
            "background": list(self.background),
            "light": list(self.light),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            kind=d["kind"],
            count=int(d["count"]),
            bound=float(d["bound"]),
            background=tuple(d["background"]),
            light=tuple(d["light"]),
            seed=int(d["seed"]),
        )


# Primitives are plain dicts so the geometry stays easy to inspect and to
# re-trace with an independent implementation.


def scene_objects(spec: SceneSpec) -> list[dict]:
    """Deterministic primitive list for ``spec``, all inside the bounding sphere."""
    if spec.count == 0:
        return []
    rng = _rng.generator("scene", spec.kind, spec.seed)
    s = spec.bound / 1.5
    objs: list[dict] = []
    if spec.kind == "spheres":
        objs.append({"type": "disk", "center": (0.0, 0.0, 0.0), "radius": 1.2 * s,
                     "albedo": (0.75, 0.75, 0.7)})
        for _ in range(spec.count):
            rho = float(rng.uniform(0.2, 0.4)) * s
            r, phi = 0.9 * s * math.sqrt(rng.random()), 2 * math.pi * rng.random()
            albedo = tuple(float(a) for a in rng.uniform(0.15, 0.95, 3))
            objs.append({"type": "sphere", "center": (r * math.cos(phi), r * math.sin(phi), rho),
                         "radius": rho, "albedo": albedo})
    else:
        for i in range(spec.count):
            if i == 0:
                half, center = 0.6 * s, (0.0, 0.0, 0.0)
            else:
                half = float(rng.uniform(0.15, 0.3)) * s
                r, phi = 0.7 * s * math.sqrt(rng.random()), 2 * math.pi * rng.random()
                center = (r * math.cos(phi), r * math.sin(phi), float(rng.uniform(-0.3, 0.3)) * s)
            colors = rng.uniform(0.1, 0.95, (2, 3))
            objs.append({"type": "box", "center": center, "half": half,
                         "angle": float(rng.uniform(0, math.pi / 2)), "checks": 4,
                         "albedo": tuple(float(a) for a in colors[0]),
                         "albedo2": tuple(float(a) for a in colors[1])})
    return objs


def _hit_sphere(o, d, obj):
    c = np.asarray(obj["center"])
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - obj["radius"] ** 2)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = np.where(-b - sq > 1e-9, -b - sq, -b + sq)
    t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (p - c) / obj["radius"]
    albedo = np.broadcast_to(np.asarray(obj["albedo"]), d.shape)
    return t, n, albedo


def _hit_disk(o, d, obj):
    cz = obj["center"][2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (cz - o[2]) / d[:, 2]
    t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    inside = (p[:, 0] - obj["center"][0]) ** 2 + (p[:, 1] - obj["center"][1]) ** 2 <= obj["radius"] ** 2
    t = np.where(inside, t, np.inf)
    n = np.zeros_like(d)
    n[:, 2] = 1.0
    albedo = np.broadcast_to(np.asarray(obj["albedo"]), d.shape)
    return t, n, albedo


def _rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _hit_box(o, d, obj):
    rot = _rot_z(obj["angle"])
    lo = (o - np.asarray(obj["center"])) @ rot  # world -> local is R^T
    ld = d @ rot
    h = obj["half"]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - lo[None, :]) / ld
        t2 = (h - lo[None, :]) / ld
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    tmin = tnear.max(axis=1)
    axis = tnear.argmax(axis=1)
    tmax = tfar.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    t = np.where(hit, tmin, np.inf)
    idx = np.arange(len(d))
    n_local = np.zeros_like(d)
    n_local[idx, axis] = -np.sign(ld[idx, axis])
    n = n_local @ rot.T
    p_local = lo[None, :] + np.where(hit, tmin, 0.0)[:, None] * ld
    cell = 2.0 * h / obj["checks"]
    parity = np.floor(p_local / cell + 0.5).astype(np.int64).sum(axis=1) % 2
    albedo = np.where(parity[:, None] == 0, np.asarray(obj["albedo"]), np.asarray(obj["albedo2"]))
    return t, n, albedo


_HITTERS = {"sphere": _hit_sphere, "disk": _hit_disk, "box": _hit_box}


def trace(spec: SceneSpec, origin, directions: np.ndarray) -> np.ndarray:
    """Shade rays from one origin; returns (N, 3) float64 colors."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    color = np.broadcast_to(np.asarray(spec.background), d.shape).copy()
    best = np.full(len(d), np.inf)
    light = np.asarray(spec.light)
    for obj in scene_objects(spec):
        t, n, albedo = _HITTERS[obj["type"]](o, d, obj)
        closer = t < best
        if not closer.any():
            continue
        # two-sided surfaces: orient normals toward the viewer
        n = np.where((np.sum(n * d, axis=1) > 0)[:, None], -n, n)
        shade = AMBIENT + np.maximum(0.0, n @ light) * (1.0 - AMBIENT)
        color[closer] = (shade[:, None] * albedo)[closer]
        best = np.where(closer, t, best)
    return np.clip(color, 0.0, 1.0)


def render_ground_truth(spec: SceneSpec, camera: Camera) -> np.ndarray:
    """Exact Lambertian render of ``spec`` seen by ``camera`` (H x W x 3 float32)."""
    rgb = trace(spec, camera.position, camera.ray_directions())
    return rgb.reshape(camera.height, camera.width, 3).astype(np.float32)


def _cameras_from_stream(rng: np.random.Generator, n: int, radius: float, fov_deg: float,
                         resolution: tuple[int, int]) -> list[Camera]:
    # one row per camera, drawn in order: a prefix of a longer request is
    # identical to a shorter request with the same stream
    u = rng.random((n, 2))
    cams = []
    for u1, u2 in u:
        z = 0.1 + 0.85 * u1  # area-uniform band of the upper hemisphere
        rxy = math.sqrt(1.0 - z * z)
        phi = 2.0 * math.pi * u2
        pos = (radius * rxy * math.cos(phi), radius * rxy * math.sin(phi), radius * z)
        cams.append(Camera(position=pos, fov_deg=fov_deg, height=resolution[0], width=resolution[1]))
    return cams


def sample_cameras(n: int, radius: float = 4.0, seed: int = 0, *, fov_deg: float = 45.0,
                   resolution: tuple[int, int] = (64, 64), stream: str = "train") -> list[Camera]:
    """``n`` cameras on the upper hemisphere of ``radius`` looking at the origin."""
    if n < 1:
        raise ValueError("need at least one camera")
    rng = _rng.generator("cameras", stream, seed)
    return _cameras_from_stream(rng, n, radius, fov_deg, resolution)


@dataclass(frozen=True)
class View:
    camera: Camera
    image: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError("image shape does not match camera resolution")


@dataclass
class SceneDataset:
    spec: SceneSpec
    train: list[View]
    test: list[View]
    seed: int = 0
    camera_radius: float = 3.5

    def __post_init__(self):
        train_pos = {v.camera.position for v in self.train}
        if any(v.camera.position in train_pos for v in self.test):
            raise ValueError("train and test cameras overlap")

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.train or self.test)[0].camera.resolution

    def subset(self, train_indices) -> "SceneDataset":
        """Same scene and test split restricted to the given train views."""
        return SceneDataset(self.spec, [self.train[i] for i in train_indices], list(self.test),
                            self.seed, self.camera_radius)


def make_dataset(spec: SceneSpec, n_train: int, n_test: int = 32, seed: int = 0, *,
                 resolution: tuple[int, int] = (64, 64), fov_deg: float = 45.0,
                 camera_radius: float = 3.5) -> SceneDataset:
    """Render a train/test dataset of ``spec``.

    Train cameras come from the seeded hemisphere stream, so for a fixed
    seed the train set of a smaller ``n_train`` is a prefix of any larger
    one. Test cameras come from an independent stream. Images are snapped
    to the 16-bit grid so that saving and reloading is lossless.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    train_cams = sample_cameras(n_train, camera_radius, seed, fov_deg=fov_deg, resolution=resolution)
    test_cams = sample_cameras(n_test, camera_radius, seed, fov_deg=fov_deg, resolution=resolution,
                               stream="test")
    train = [View(c, quantize16(render_ground_truth(spec, c))) for c in train_cams]
    test = [View(c, quantize16(render_ground_truth(spec, c))) for c in test_cams]
    return SceneDataset(spec, train, test, seed, camera_radius)


MANIFEST = "cameras.json"


def save_dataset(dataset: SceneDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    views = []
    for split, items in (("train", dataset.train), ("test", dataset.test)):
        (directory / split).mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(items):
            rel = f"{split}/view_{i:04d}.png"
            write_png16(directory / rel, v.image)
            views.append({"split": split, "index": i, "file": rel, "camera": v.camera.to_dict()})
    manifest = {
        "format": "phdrop-dataset",
        "version": 1,
        "seed": dataset.seed,
        "camera_radius": dataset.camera_radius,
        "spec": dataset.spec.to_dict(),
        "views": views,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_dataset(directory: str | Path) -> SceneDataset:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    try:
        manifest = json.loads(path.read_text())
        spec = SceneSpec.from_dict(manifest["spec"])
        records = manifest["views"]
        seed = int(manifest["seed"])
        radius = float(manifest.get("camera_radius", 3.5))
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    splits: dict[str, list[View]] = {"train": [], "test": []}
    for rec in records:
        try:
            cam = Camera.from_dict(rec["camera"])
            split = rec["split"]
            file = directory / rec["file"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed view record ({exc})") from exc
        if split not in splits:
            raise ManifestError(f"{path}: unknown split {split!r}")
        image = read_png16(file)
        if image.shape != (cam.height, cam.width, 3):
            raise DatasetError(f"{file}: image is {image.shape}, manifest says "
                               f"{(cam.height, cam.width, 3)}")
        splits[split].append(View(cam, image))
    return SceneDataset(spec, splits["train"], splits["test"], seed, radius)


__all__ = [
    "AMBIENT", "Camera", "SceneSpec", "SceneDataset", "View", "DatasetError", "ManifestError",
    "ImageDecodeError", "scene_objects", "trace", "render_ground_truth", "sample_cameras",
    "make_dataset", "save_dataset", "load_dataset",
]
