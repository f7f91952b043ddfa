"""Checkpoint format: a text manifest plus one little-endian float32 blob.

``manifest.txt``::

    REALLM01
    step<TAB>1234
    blob_sha256<TAB><hex>
    config<TAB>key=value,key=value,...
    tensor<TAB>name<TAB>d0,d1,...<TAB>byte_offset
    ...

``weights.bin`` holds the tensors back to back in manifest order. Adam
moments, when saved, are stored as extra tensors ``adam.m/<name>`` and
``adam.v/<name>``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = "REALLM01"
MANIFEST = "manifest.txt"
BLOB = "weights.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: dict, step: int = 0, moments=None, meta=None) -> Path:
    """Write params (Tensors or arrays) and optional (m, v) moment dicts to directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray]] = []
    for name, value in params.items():
        entries.append((name, np.asarray(getattr(value, "data", value))))
    if moments is not None:
        first, second = moments
        entries += [(f"adam.m/{k}", np.asarray(v)) for k, v in first.items()]
        entries += [(f"adam.v/{k}", np.asarray(v)) for k, v in second.items()]
    chunks = []
    lines = []
    offset = 0
    for name, arr in entries:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor\t{name}\t{shape}\t{offset}\n")
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    cfg = ",".join(f"{k}={v}" for k, v in config.to_dict().items())
    head = [f"{MAGIC}\n", f"step\t{step}\n", f"blob_sha256\t{hashlib.sha256(blob).hexdigest()}\n",
            f"config\t{cfg}\n"]
    for k, v in (meta or {}).items():
        head.append(f"meta\t{k}\t{v}\n")
    (out / BLOB).write_bytes(blob)
    (out / MANIFEST).write_text("".join(head + lines))
    return out


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    root = Path(path)
    try:
        text = (root / MANIFEST).read_text()
        blob = (root / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {root}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{root / MANIFEST}: missing {MAGIC} header")
    step, digest, cfg, meta = 0, None, None, {}
    tensors = []
    for line in lines[1:]:
        parts = line.split("\t")
        tag = parts[0]
        if tag == "step":
            step = int(parts[1])
        elif tag == "blob_sha256":
            digest = parts[1]
        elif tag == "config":
            cfg = dict(item.split("=", 1) for item in parts[1].split(",") if item)
        elif tag == "meta":
            meta[parts[1]] = parts[2]
        elif tag == "tensor":
            shape = tuple(int(d) for d in parts[2].split(",") if d)
            tensors.append((parts[1], shape, int(parts[3])))
        else:
            raise CheckpointError(f"{root / MANIFEST}: unknown manifest line {line!r}")
    if cfg is None:
        raise CheckpointError(f"{root / MANIFEST}: no config line")
    if digest is not None and hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError(f"{root / BLOB}: checksum mismatch (corrupt blob)")
    config = ModelConfig.from_dict(cfg)
    arrays = {}
    for name, shape, offset in tensors:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{name}: blob too short ({len(blob)} bytes, need {end})")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    ck = Checkpoint(config, {}, step=step, meta=meta)
    for name, arr in arrays.items():
        if name.startswith("adam.m/"):
            ck.first_moments[name[7:]] = arr
        elif name.startswith("adam.v/"):
            ck.second_moments[name[7:]] = arr
        else:
            ck.params[name] = arr
    _check_shapes(ck, expected or config)
    return ck


def _check_shapes(ck: Checkpoint, config: ModelConfig) -> None:
    want = dict(param_shapes(config))
    problems = []
    for name, shape in want.items():
        got = ck.params.get(name)
        if got is None:
            problems.append(f"{name}: missing")
        elif got.shape != shape:
            problems.append(f"{name}: checkpoint {got.shape} vs config {shape}")
    for name in ck.params:
        if name not in want:
            problems.append(f"{name}: not in config")
    if problems:
        raise CheckpointError("shape mismatch between checkpoint and config: " + "; ".join(problems))
