"""Encoded-MLP radiance field with ray-marched volume rendering."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .. import _rng
from .encoding import ConfigError, EncodingConfig, encode
from .mask import DropoutMask, MaskError
from .rays import Ray, composite, pixel_rays, sphere_bounds, stratified_samples

ACTIVATIONS = ("relu", "sin", "none")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray = field(repr=False)  # (in, out)
    bias: np.ndarray = field(repr=False)
    activation: str = "relu"

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.weight.shape)


@dataclass(frozen=True)
class MlpFieldParams:
    """Weights of an encoded MLP field plus the settings needed to render it.

    Layer ``i`` maps ``h @ weight + bias``; the last layer emits four raw
    values (density, then RGB). ``dropout_layer`` selects the weight matrix
    whose entries are the maskable units.
    """

    encoding: EncodingConfig
    layers: tuple[Layer, ...]
    dropout_layer: int = 1
    tables: np.ndarray | None = field(default=None, repr=False)
    bound: float = 1.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_samples: int = 48

    kind = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        width = self.encoding.width
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.weight.shape[0] != width:
                raise ConfigError(f"layer {i} expects input width {width}, got {layer.weight.shape}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ConfigError(f"layer {i} bias does not match its weight")
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i} has unknown activation {layer.activation!r}")
            width = layer.weight.shape[1]
        if width != 4:
            raise ConfigError("the last layer must output 4 values (density + RGB)")
        if not 0 <= self.dropout_layer < len(self.layers) - 1:
            raise ConfigError("dropout target must index a hidden layer")
        if self.encoding.kind == "hash":
            e = self.encoding
            if self.tables is None or self.tables.shape != (e.n_levels, e.table_size, e.features_per_level):
                raise ConfigError("hash encoding needs tables of shape (levels, T, F)")
        if self.n_samples < 2:
            raise ConfigError("need at least two samples per ray")
        if not all(np.isfinite(a).all() for a in self.arrays().values()):
            raise ConfigError("parameters must be finite")

    @property
    def mask_target(self) -> str:
        return f"mlp:{self.dropout_layer}"

    @property
    def n_units(self) -> int:
        return int(self.layers[self.dropout_layer].weight.size)

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.arrays().values())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"w{i}"] = layer.weight
            out[f"b{i}"] = layer.bias
        if self.tables is not None:
            out["tables"] = self.tables
        return out

    def tensors(self, dtype=torch.float32, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {k: torch.tensor(np.asarray(v), dtype=dtype, requires_grad=requires_grad)
                for k, v in self.arrays().items()}

    def with_tensors(self, tensors: dict[str, torch.Tensor]) -> "MlpFieldParams":
        arr = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in tensors.items()}
        layers = tuple(Layer(arr[f"w{i}"], arr[f"b{i}"], l.activation) for i, l in enumerate(self.layers))
        return replace(self, layers=layers, tables=arr.get("tables"))

    def activations(self) -> tuple[str, ...]:
        return tuple(l.activation for l in self.layers)

    def keep_tensor(self, mask: DropoutMask | None, dtype=torch.float32) -> torch.Tensor | None:
        if mask is None:
            return None
        if mask.target != self.mask_target or mask.n_units != self.n_units:
            raise MaskError(f"mask for {mask.target} with {mask.n_units} units does not fit "
                            f"{self.mask_target} with {self.n_units} units")
        shape = self.layers[self.dropout_layer].weight.shape
        return torch.as_tensor(mask.keep().reshape(shape), dtype=dtype)

    def render(self, camera, mask: DropoutMask | None = None, key: int = 0,
               pixels: np.ndarray | None = None, chunk: int = 2048) -> np.ndarray:
        """Render a view (H, W, 3), or only the listed flat pixel indices (N, 3)."""
        origin, dirs = pixel_rays(camera)
        ids = np.arange(len(dirs)) if pixels is None else np.asarray(pixels)
        tensors = self.tensors()
        keep = self.keep_tensor(mask)
        out = np.empty((len(ids), 3), dtype=np.float32)
        with torch.no_grad():
            for s in range(0, len(ids), chunk):
                sl = ids[s:s + chunk]
                out[s:s + len(sl)] = render_rays(self, tensors, origin, dirs[sl], sl, key, keep).numpy()
        if pixels is None:
            return out.reshape(camera.height, camera.width, 3)
        return out


def init_mlp(encoding: EncodingConfig, width: int = 128, depth: int = 4, seed: int = 0, *,
             dropout_layer: int = 1, bound: float = 1.5, background=(1.0, 1.0, 1.0),
             n_samples: int = 48) -> MlpFieldParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation; ``depth`` counts hidden layers.

    ``spe`` fields get a sine activation on the first layer.
    """
    rng = _rng.generator("mlp-init", seed)
    dims = [encoding.width] + [width] * depth + [4]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        lim = 1.0 / np.sqrt(a)
        w = rng.uniform(-lim, lim, (a, b)).astype(np.float32)
        bias = rng.uniform(-lim, lim, b).astype(np.float32)
        if i == len(dims) - 2:
            act = "none"
        elif i == 0 and encoding.kind == "spe":
            act = "sin"
        else:
            act = "relu"
        layers.append(Layer(w, bias, act))
    tables = None
    if encoding.kind == "hash":
        tables = rng.uniform(-1e-4, 1e-4, (encoding.n_levels, encoding.table_size,
                                            encoding.features_per_level)).astype(np.float32)
    return MlpFieldParams(encoding, tuple(layers), dropout_layer, tables, bound, background, n_samples)


def forward_raw(params: MlpFieldParams, tensors: dict, features: torch.Tensor,
                keep: torch.Tensor | None, pattern: list | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw field values; ``pattern`` (if given) collects each rectifier's on/off state."""
    h = features
    for i, act in enumerate(params.activations()):
        w = tensors[f"w{i}"]
        if keep is not None and i == params.dropout_layer:
            w = w * keep  # dropped entries become exact zeros; survivors keep their scale
        h = h @ w + tensors[f"b{i}"]
        if act == "relu":
            if pattern is not None:
                pattern.append((h.detach() > 0).numpy().tobytes())
            h = torch.relu(h)
        elif act == "sin":
            h = torch.sin(h)
    return F.softplus(h[..., 0]), torch.sigmoid(h[..., 1:4])


def mlp_forward(params: MlpFieldParams, features, mask: DropoutMask | None = None):
    """Evaluate the MLP on encoded features -> (density >= 0, rgb in [0, 1])."""
    feats = np.asarray(features)
    if feats.shape[-1] != params.encoding.width:
        raise ValueError(f"feature width {feats.shape[-1]} does not match {params.encoding.width}")
    dtype = torch.float64 if feats.dtype == np.float64 else torch.float32
    with torch.no_grad():
        density, rgb = forward_raw(params, params.tensors(dtype), torch.as_tensor(feats, dtype=dtype),
                                   params.keep_tensor(mask, dtype))
    return density.numpy(), rgb.numpy()


def shade_samples(params: MlpFieldParams, tensors: dict, origin, dirs: np.ndarray, t: np.ndarray,
                  deltas: np.ndarray, keep, pattern: list | None = None) -> torch.Tensor:
    """Volume-render rays whose sample distances are already fixed."""
    dtype = tensors["w0"].dtype
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    pts = o[:, None, :] + t[..., None] * dirs[:, None, :]
    pts_t = torch.as_tensor(pts.reshape(-1, 3), dtype=dtype)
    feats = encode(pts_t, params.encoding, tensors.get("tables"), params.bound)
    density, rgb = forward_raw(params, tensors, feats, keep, pattern)
    n, s = t.shape
    sigma_delta = density.reshape(n, s) * torch.as_tensor(deltas, dtype=dtype)
    bg = torch.as_tensor(params.background, dtype=dtype)
    return composite(sigma_delta, rgb.reshape(n, s, 3), bg)


def render_rays(params: MlpFieldParams, tensors: dict, origin, dirs: np.ndarray, ray_ids: np.ndarray,
                key: int, keep=None, pattern: list | None = None) -> torch.Tensor:
    """Colors (N, 3) of rays sharing one origin; rays missing the bounds see the background."""
    dtype = tensors["w0"].dtype
    near, far, hit = sphere_bounds(origin, dirs, params.bound)
    out = torch.as_tensor(params.background, dtype=dtype).expand(len(dirs), 3)
    if not hit.any():
        return out.clone()
    t, deltas = stratified_samples(near[hit], far[hit], params.n_samples, np.asarray(ray_ids)[hit], key)
    o = np.asarray(origin, dtype=np.float64)
    if o.ndim == 2:
        o = o[hit]
    colors = shade_samples(params, tensors, o, dirs[hit], t, deltas, keep, pattern)
    if hit.all():
        return colors
    idx = torch.as_tensor(np.flatnonzero(hit))
    return out.index_put((idx,), colors)


def render_ray_nerf(params: MlpFieldParams, ray: Ray, n_samples: int | None = None,
                    mask: DropoutMask | None = None, rng_key: int = 0, ray_id: int = 0) -> np.ndarray:
    """Render a single ray over its own [near, far] interval."""
    n = params.n_samples if n_samples is None else n_samples
    t, deltas = stratified_samples(np.array([ray.near]), np.array([ray.far]), n, np.array([ray_id]), rng_key)
    tensors = params.tensors()
    with torch.no_grad():
        c = shade_samples(params, tensors, np.asarray(ray.origin), np.asarray([ray.direction]), t, deltas,
                          params.keep_tensor(mask))
    return c[0].numpy()
