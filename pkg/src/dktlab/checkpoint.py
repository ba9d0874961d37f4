"""Text checkpoints.

Layout::

    dktlab-ckpt v1
    [meta]
    key=value
    ...
    [array <name> <rows> <cols>]
    <one float per line, row-major, repr formatting>
    ...
    [end]

Floats are written with ``repr`` so values survive the round trip bitwise.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import __version__
from .backbone import MLP, MLPConfig
from .kernels import KernelSpec, make_kernel

MAGIC = "dktlab-ckpt"
VERSION = "v1"


class CheckpointError(ValueError):
    pass


def rng_digest(seeds) -> str:
    text = ",".join(str(int(s)) for s in seeds)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, kernel: KernelSpec | None, backbone: MLP | None,
                    meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("artifact_version", __version__)
    arrays: list[tuple[str, np.ndarray]] = []
    if kernel is not None:
        meta["kernel.family"] = kernel.family
        meta["kernel.input_dim"] = kernel.input_dim
        for name in sorted(kernel.params):
            arrays.append((f"kernel.{name}", kernel.params[name].values))
    if backbone is not None:
        c = backbone.config
        meta["backbone.input_dim"] = c.input_dim
        meta["backbone.hidden_dims"] = ",".join(str(d) for d in c.hidden_dims)
        meta["backbone.output_dim"] = c.output_dim
        meta["backbone.activation"] = c.activation
        meta["backbone.seed"] = c.seed
        arrays.append(("backbone.flat", backbone.flatten().reshape(-1, 1)))
    lines = [f"{MAGIC} {VERSION}", "[meta]"]
    for key in meta:
        value = str(meta[key])
        if "\n" in value:
            raise CheckpointError(f"meta value for {key!r} spans lines")
        lines.append(f"{key}={value}")
    for name, arr in arrays:
        arr = np.atleast_2d(arr)
        lines.append(f"[array {name} {arr.shape[0]} {arr.shape[1]}]")
        lines.extend(repr(float(v)) for v in arr.ravel())
    lines.append("[end]")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith(MAGIC):
        raise CheckpointError("not a dktlab checkpoint")
    version = lines[0][len(MAGIC):].strip()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {VERSION})")
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i, section, ended = 1, None, False
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line:
            continue
        if line == "[meta]":
            section = "meta"
        elif line == "[end]":
            ended = True
            break
        elif line.startswith("[array "):
            try:
                _, name, r, c = line.strip("[]").split()
                rows, cols = int(r), int(c)
            except ValueError:
                raise CheckpointError(f"bad array header: {line}") from None
            count = rows * cols
            chunk = lines[i:i + count]
            try:
                values = [float(v) for v in chunk]
            except ValueError:
                raise CheckpointError(f"section {name}: non-numeric entry") from None
            if len(values) < count:
                raise CheckpointError(f"section {name}: truncated, {len(values)} of {count} values")
            arrays[name] = np.array(values).reshape(rows, cols)
            i += count
            section = None
        elif section == "meta" and "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
        else:
            raise CheckpointError(f"unexpected line {i}: {line[:40]!r}")
    if not ended:
        raise CheckpointError("checkpoint truncated: missing [end]")
    return meta, arrays


def load_checkpoint(path) -> tuple[KernelSpec | None, MLP | None, dict]:
    meta, arrays = read_checkpoint(path)
    kernel = None
    if "kernel.family" in meta:
        q = arrays["kernel.raw_weights"].shape[0] if "kernel.raw_weights" in arrays else 4
        kernel = make_kernel(meta["kernel.family"], int(meta["kernel.input_dim"]), n_mixtures=q)
        for name, t in kernel.params.items():
            key = f"kernel.{name}"
            if key not in arrays:
                raise CheckpointError(f"missing section {key}")
            if arrays[key].shape != t.shape:
                raise CheckpointError(f"section {key}: shape {arrays[key].shape} != {t.shape}")
            t.values = arrays[key].copy()
    backbone = None
    if "backbone.input_dim" in meta:
        hidden = [int(h) for h in meta["backbone.hidden_dims"].split(",") if h]
        cfg = MLPConfig(int(meta["backbone.input_dim"]), hidden, int(meta["backbone.output_dim"]),
                        meta["backbone.activation"], int(meta["backbone.seed"]))
        backbone = MLP(cfg)
        if "backbone.flat" not in arrays:
            raise CheckpointError("missing section backbone.flat")
        try:
            backbone.load_flat(arrays["backbone.flat"])
        except ValueError as exc:
            raise CheckpointError(f"section backbone.flat: {exc}") from None
    return kernel, backbone, meta
