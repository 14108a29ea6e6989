"""Checkpoint container for networks, optimizer state and training progress.

Layout of a checkpoint file::

    PRHEA-CKPT\\n                      magic line
    <8-byte little-endian header size>
    <UTF-8 JSON header>                metadata + tensor table
    <payload>                          tensors as little-endian float64

The header is sorted, indented JSON so it can be read with ``head``. Each
tensor table entry gives ``name``, ``shape`` and byte ``offset`` into the
payload; a CRC32 of the payload guards against truncation and bit rot.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .nn import GaussianPolicy, RmsPropState, ValueNet

MAGIC = b"PRHEA-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    env_id: str
    state_dim: int
    action_dim: int
    hidden: tuple
    tensors: Dict[str, np.ndarray]
    steps: int = 0
    episodes: int = 0
    value_active: bool = False
    rng_state: Optional[dict] = None
    buffer_inserted: int = 0
    buffer_capacity: int = 0
    optimizer: Dict[str, float] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def policy(self) -> GaussianPolicy:
        p = GaussianPolicy(self.state_dim, self.action_dim, self.hidden)
        p.flat[...] = self.tensors["policy"]
        return p

    def value(self) -> ValueNet:
        v = ValueNet(self.state_dim, self.hidden)
        v.flat[...] = self.tensors["value"]
        return v


def _expected_shapes(ckpt: Checkpoint) -> Dict[str, tuple]:
    n_policy = GaussianPolicy(ckpt.state_dim, ckpt.action_dim, ckpt.hidden).flat.size
    n_value = ValueNet(ckpt.state_dim, ckpt.hidden).flat.size
    shapes = {
        "policy": (n_policy,),
        "value": (n_value,),
        "policy_opt": (n_policy,),
        "value_opt": (n_value,),
    }
    if ckpt.buffer_capacity:
        shapes.update({
            "buffer_states": (ckpt.buffer_capacity, ckpt.state_dim),
            "buffer_actions": (ckpt.buffer_capacity, ckpt.action_dim),
            "buffer_returns": (ckpt.buffer_capacity,),
        })
    return shapes


def save(ckpt: Checkpoint, path: os.PathLike) -> None:
    names = sorted(ckpt.tensors)
    table, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "env_id": ckpt.env_id,
        "state_dim": ckpt.state_dim,
        "action_dim": ckpt.action_dim,
        "hidden": list(ckpt.hidden),
        "steps": ckpt.steps,
        "episodes": ckpt.episodes,
        "value_active": ckpt.value_active,
        "rng_state": ckpt.rng_state,
        "buffer_inserted": ckpt.buffer_inserted,
        "buffer_capacity": ckpt.buffer_capacity,
        "optimizer": ckpt.optimizer,
        "meta": ckpt.meta,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def load(path: os.PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CorruptCheckpointError(f"{path}: truncated before header size")
    (head_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + head_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    pos += head_len

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")

    payload = data[pos:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).astype(np.float64)

    ckpt = Checkpoint(
        env_id=header["env_id"],
        state_dim=header["state_dim"],
        action_dim=header["action_dim"],
        hidden=tuple(header["hidden"]),
        tensors=tensors,
        steps=header["steps"],
        episodes=header["episodes"],
        value_active=header["value_active"],
        rng_state=header["rng_state"],
        buffer_inserted=header["buffer_inserted"],
        buffer_capacity=header["buffer_capacity"],
        optimizer=header["optimizer"],
        meta=header["meta"],
    )
    for name, shape in _expected_shapes(ckpt).items():
        if name not in tensors:
            raise CorruptCheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise DimensionMismatchError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, declared dims imply {shape}"
            )
    return ckpt


def check_compatible(ckpt: Checkpoint, env) -> None:
    spec = env.spec
    if (ckpt.state_dim, ckpt.action_dim) != (spec.state_dim, spec.action_dim):
        raise DimensionMismatchError(
            f"checkpoint has state_dim={ckpt.state_dim}, action_dim={ckpt.action_dim}; "
            f"environment {env.env_id!r} has state_dim={spec.state_dim}, action_dim={spec.action_dim}"
        )


def from_learner(learner, meta: Optional[dict] = None) -> Checkpoint:
    buf = learner.buffer
    curve = np.array(learner.curve, dtype=np.float64).reshape(-1, 3)
    tensors = {
        "policy": learner.policy.flat.copy(),
        "value": learner.value.flat.copy(),
        "policy_opt": learner.policy_opt.accumulator.copy(),
        "value_opt": learner.value_opt.accumulator.copy(),
        "buffer_states": buf.states.copy(),
        "buffer_actions": buf.actions.copy(),
        "buffer_returns": buf.returns.copy(),
        "curve": curve,
    }
    opt = learner.policy_opt
    return Checkpoint(
        env_id=learner.env_id,
        state_dim=learner.policy.state_dim,
        action_dim=learner.policy.action_dim,
        hidden=tuple(learner.policy.hidden),
        tensors=tensors,
        steps=learner.steps,
        episodes=learner.episodes,
        value_active=learner.value_active,
        rng_state=learner.rng.bit_generator.state,
        buffer_inserted=buf.inserted,
        buffer_capacity=buf.capacity,
        optimizer={
            "learning_rate": opt.learning_rate,
            "decay": opt.decay,
            "clip_norm": opt.clip_norm,
            "eps": opt.eps,
            "policy_steps": learner.policy_opt.steps,
            "value_steps": learner.value_opt.steps,
        },
        meta=dict(meta or {}),
    )


def to_learner(ckpt: Checkpoint, learn=None):
    """Rebuild a :class:`~prhea.learner.Learner` ready to continue training."""
    from .learner import Learner, ReplayBuffer

    policy, value = ckpt.policy(), ckpt.value()
    o = ckpt.optimizer
    kw = dict(learning_rate=o["learning_rate"], decay=o["decay"], clip_norm=o["clip_norm"], eps=o["eps"])
    policy_opt = RmsPropState(ckpt.tensors["policy_opt"].copy(), steps=o["policy_steps"], **kw)
    value_opt = RmsPropState(ckpt.tensors["value_opt"].copy(), steps=o["value_steps"], **kw)
    capacity = ckpt.buffer_capacity or (learn.buffer_capacity if learn is not None else 1)
    buf = ReplayBuffer(capacity, ckpt.state_dim, ckpt.action_dim)
    if ckpt.buffer_capacity:
        buf.states[...] = ckpt.tensors["buffer_states"]
        buf.actions[...] = ckpt.tensors["buffer_actions"]
        buf.returns[...] = ckpt.tensors["buffer_returns"]
        buf.inserted = ckpt.buffer_inserted
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    curve = [(int(s), int(e), float(r)) for s, e, r in ckpt.tensors.get("curve", np.zeros((0, 3)))]
    return Learner(
        env_id=ckpt.env_id,
        policy=policy,
        value=value,
        policy_opt=policy_opt,
        value_opt=value_opt,
        buffer=buf,
        rng=rng,
        steps=ckpt.steps,
        episodes=ckpt.episodes,
        value_active=ckpt.value_active,
        curve=curve,
    )
