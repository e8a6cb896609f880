"""Binary checkpoints of supernet training state.

Layout::

    b"SNASCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON, sorted keys, compact separators
    payload                float64 LE arrays, in header order
    32 bytes               SHA-256 of everything above

The header lists every array by name and shape, so the payload needs no
framing. Writing is deterministic: saving a loaded checkpoint reproduces
the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .space import SearchSpace
from .supernet import BranchGroup, ConvUnit, SupernetParams
from .training import TrainConfig, TrainerState

MAGIC = b"SNASCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _unit_from(arrays: dict, prefix: str, cls=ConvUnit, **extra):
    slope = arrays.get(f"{prefix}.prelu_slope")
    return cls(
        weight=Tensor(arrays[f"{prefix}.weight"], requires_grad=True),
        bn_gamma=Tensor(arrays[f"{prefix}.bn_gamma"], requires_grad=True),
        bn_beta=Tensor(arrays[f"{prefix}.bn_beta"], requires_grad=True),
        bn_mean=arrays[f"{prefix}.bn_mean"],
        bn_var=arrays[f"{prefix}.bn_var"],
        prelu_slope=None if slope is None else Tensor(slope, requires_grad=True),
        **extra,
    )


def encode_state(state: TrainerState) -> bytes:
    params = state.params
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"param:{n}", t.data) for n, t, _ in params.named_tensors()]
    arrays += [(f"buffer:{n}", a) for n, a in params.named_buffers()]
    arrays += [(f"velocity:{n}", v) for n, v in sorted(state.velocity.items())]
    header = {
        "space": params.space.to_dict(),
        "stage": params.stage,
        "groups": [[list(g.member_options) for g in groups] for groups in params.layers],
        "has_stem": params.stem is not None,
        "n_shortcuts": len(params.shortcuts),
        "bn_momentum": params.bn_momentum,
        "bn_eps": params.bn_eps,
        "config": state.config.to_dict(),
        "phase": state.phase,
        "iteration": state.iteration,
        "lr": state.lr,
        "sampler_state": state.sampler_state,
        "history": state.history,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def decode_state(blob: bytes) -> TrainerState:
    if len(blob) < 52 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch; file is corrupted")
    version, head_len = struct.unpack_from("<IQ", body, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[20:20 + head_len])
    off = 20 + head_len
    params_a, buffers, velocity = {}, {}, {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        kind, key = name.split(":", 1)
        {"param": params_a, "buffer": buffers, "velocity": velocity}[kind][key] = a
    if off != len(body):
        raise CheckpointError("checkpoint payload length does not match its header")

    arrays = {**params_a, **buffers}
    space = SearchSpace.from_dict(header["space"])
    stem = _unit_from(arrays, "stem") if header["has_stem"] else None
    layers = [
        [_unit_from(arrays, f"layer{i + 1}.group{g}", BranchGroup, member_options=tuple(opts))
         for g, opts in enumerate(groups)]
        for i, groups in enumerate(header["groups"])
    ]
    shortcuts = [Tensor(arrays[f"block{b + 1}.shortcut"], requires_grad=True) for b in range(header["n_shortcuts"])]
    params = SupernetParams(
        space, layers, shortcuts,
        Tensor(arrays["fc.weight"], requires_grad=True), Tensor(arrays["fc.bias"], requires_grad=True),
        stem=stem, stage=header["stage"], bn_momentum=header["bn_momentum"], bn_eps=header["bn_eps"],
    )
    return TrainerState(
        params=params,
        config=TrainConfig(**header["config"]),
        phase=header["phase"],
        iteration=header["iteration"],
        velocity=velocity,
        sampler_state=header["sampler_state"],
        lr=header["lr"],
        history=header["history"],
    )


def save_checkpoint(state: TrainerState, path) -> None:
    """Write atomically: a failed write never leaves a partial file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_state(state))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainerState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_state(path.read_bytes())
