"""Checkpoint file format.

Layout: one UTF-8 JSON header line terminated by ``\\n``, followed by every
parameter array as little-endian float32, concatenated in the order listed
by ``net.param_shapes`` (the same order is repeated in the header under
``"params"``).  Arrays are C-ordered; ``conv_w`` is ``[out, in]`` which is
byte-identical to an ``[out, in, 1, 1]`` kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .net import Arch, param_shapes

FORMAT_NAME = "ovenlab-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    arch: Arch
    task: str
    target: int
    seed: int
    step: int

    def header(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "arch": self.arch.as_dict(),
            "task": self.task,
            "target": self.target,
            "seed": self.seed,
            "step": self.step,
            "params": [[name, list(shape)] for name, shape in param_shapes(self.arch)],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8") + b"\n"
        body = b"".join(
            np.ascontiguousarray(self.params[name], dtype="<f4").tobytes()
            for name, _ in param_shapes(self.arch)
        )
        return head + body

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def from_bytes(data: bytes, expect_arch: Arch = None) -> Checkpoint:
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    try:
        head = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if head.get("format") != FORMAT_NAME or head.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {head.get('format')!r} v{head.get('version')}")
    arch = Arch(**head["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"architecture mismatch: checkpoint {arch}, expected {expect_arch}")
    listed = [(n, tuple(s)) for n, s in head["params"]]
    if listed != param_shapes(arch):
        raise CheckpointError("parameter table does not match the architecture")
    body = memoryview(data)[nl + 1 :]
    params, offset = {}, 0
    for name, shape in listed:
        size = int(np.prod(shape)) * 4
        if offset + size > len(body):
            raise CheckpointError("truncated parameter data")
        params[name] = np.frombuffer(body[offset : offset + size], dtype="<f4").reshape(shape).astype(np.float32)
        offset += size
    if offset != len(body):
        raise CheckpointError("trailing bytes after parameter data")
    return Checkpoint(params, arch, head["task"], int(head["target"]), int(head["seed"]), int(head["step"]))


def load(path, expect_arch: Arch = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expect_arch)
