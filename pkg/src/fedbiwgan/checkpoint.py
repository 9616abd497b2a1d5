"""Self-describing binary container for model parameters and window
stores: a magic/version header, a JSON metadata block, and per-tensor
name/shape/float64 records. Byte-identical across platforms (everything
little-endian, dict keys sorted).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FBWGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(path, metadata: dict, tensors: dict):
    """Write tensors (name -> array) with a JSON metadata block."""
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        names = sorted(tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_container(path):
    """Read back (metadata, tensors)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    (meta_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    metadata = json.loads(buf[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(
            buf, dtype="<f8", count=size, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += 8 * size
    return metadata, tensors


# ---------------------------------------------------------------------------
# model bundles


def save_models(path, model_cfg, models: dict, extra_meta=None):
    """Persist named models; each contributes its params under a prefix."""
    tensors = {}
    for prefix, model in models.items():
        for name, p in model.params().items():
            tensors[f"{prefix}:{name}"] = p.data
    meta = {"model_config": model_cfg.to_dict(), "models": sorted(models)}
    meta.update(extra_meta or {})
    save_container(path, meta, tensors)


def load_models(path, builders):
    """Rebuild models from a bundle; builders maps prefix -> callable(cfg)
    returning a freshly initialized model whose params get overwritten."""
    from .models import ModelConfig

    metadata, tensors = load_container(path)
    cfg = ModelConfig.from_dict(metadata["model_config"])
    models = {}
    for prefix in metadata["models"]:
        if prefix not in builders:
            raise CheckpointError(f"{path}: no builder for model {prefix!r}")
        model = builders[prefix](cfg)
        for name, p in model.params().items():
            key = f"{prefix}:{name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if tensors[key].shape != p.data.shape:
                raise CheckpointError(f"{path}: shape mismatch for {key}")
            p.data[...] = tensors[key]
        models[prefix] = model
    return metadata, cfg, models
