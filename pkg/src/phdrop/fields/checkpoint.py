"""Binary checkpoint format shared by both field families.

Layout, all integers little-endian::

    b"PHDC"  u32 version  u8 kind (0 = mlp, 1 = splats)
    u32 n    n bytes of UTF-8 JSON header
    float32 parameter payload

The JSON header carries the encoding config, background, bound and the
array shapes; the payload concatenates the arrays in header order. For
MLPs that order is ``w0, b0, w1, b1, ..., [tables]`` (weights stored
(in, out) row-major); for splats it is ``centers, log_scales,
color_logits, opacity_logits``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoding import EncodingConfig
from .mlp import Layer, MlpFieldParams
from .splats import SplatFieldParams

MAGIC = b"PHDC"
VERSION = 1
KIND_TAGS = {"mlp": 0, "splats": 1}


class CheckpointError(IOError):
    pass


def _header(model) -> dict:
    arrays = model.arrays()
    head = {
        "bound": model.bound,
        "background": list(model.background),
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    if model.kind == "mlp":
        head.update(encoding=model.encoding.to_dict(), activations=list(model.activations()),
                    dropout_layer=model.dropout_layer, n_samples=model.n_samples)
    return head


def to_bytes(model) -> bytes:
    head = json.dumps(_header(model), sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.arrays().values())
    return MAGIC + struct.pack("<IBI", VERSION, KIND_TAGS[model.kind], len(head)) + head + payload


def from_bytes(blob: bytes, source: str = "<bytes>"):
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    try:
        version, kind, n = struct.unpack_from("<IBI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        off = 4 + struct.calcsize("<IBI")
        head = json.loads(blob[off:off + n].decode())
        off += n
        arrays = {}
        for name, shape in head["arrays"]:
            count = int(np.prod(shape, dtype=np.int64))
            a = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            arrays[name] = a.astype(np.float32).reshape(shape)
            off += 4 * count
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
    if off != len(blob):
        raise CheckpointError(f"{source}: trailing or missing payload bytes")
    if kind == KIND_TAGS["mlp"]:
        enc = head["encoding"]
        enc["hash_resolutions"] = tuple(enc["hash_resolutions"])
        layers = tuple(Layer(arrays[f"w{i}"], arrays[f"b{i}"], act) for i, act in enumerate(head["activations"]))
        return MlpFieldParams(EncodingConfig(**enc), layers, head["dropout_layer"], arrays.get("tables"),
                              head["bound"], tuple(head["background"]), head["n_samples"])
    if kind == KIND_TAGS["splats"]:
        return SplatFieldParams(**arrays, bound=head["bound"], background=tuple(head["background"]))
    raise CheckpointError(f"{source}: unknown model kind tag {kind}")


def save_checkpoint(model, path) -> str:
    """Write ``model`` and return the hex SHA-256 of the file contents."""
    blob = to_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, str(path))


def model_digest(model) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()
