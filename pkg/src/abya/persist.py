"""Checkpoints, metrics CSV and transcript JSONL.

Checkpoint layout (all integers little-endian u32):

    b"ABYA1" | version | entry count | entries... | crc32 of everything before

    entry := name length | utf-8 name | rank | dims[rank] | float32 payload
"""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from collections import OrderedDict
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import torch

from .agent import Agent, ModelKind
from .autodiff import AdamState

MAGIC = b"ABYA1"
VERSION = 1

KIND_CODE = {ModelKind.MAIN: 0, ModelKind.FILM: 1, ModelKind.BASELINE: 2}


class CheckpointError(ValueError):
    pass


def _scalar(a: np.ndarray) -> int:
    # accept scalars stored either 0-d or with dims [1]
    return int(np.asarray(a).reshape(-1)[0])


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _u32(VERSION), _u32(len(entries))]
    for name, arr in entries.items():
        a = np.array(arr, dtype="<f4", order="C")  # keeps 0-d scalars 0-d
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(a.ndim)]
        parts += [_u32(d) for d in a.shape]
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError(f"checkpoint truncated: only {len(data)} bytes")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint truncated inside an entry")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last entry")
    return out


def save_checkpoint(path: str, entries: Mapping[str, np.ndarray]) -> None:
    data = encode_checkpoint(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# -- agent <-> entries -------------------------------------------------------


def agent_entries(agent: Agent, adam: Optional[AdamState] = None) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    out["meta/kind"] = np.array(KIND_CODE[agent.kind], dtype=np.float32)
    for name, p in agent.named_parameters():
        out[f"param/{name}"] = p.detach().numpy()
    if adam is not None:
        out["adam/t"] = np.array(adam.t, dtype=np.float32)
        for name in adam.m:
            out[f"adam.m/{name}"] = adam.m[name].numpy()
            out[f"adam.v/{name}"] = adam.v[name].numpy()
    return out


def lm_entries(agent: Agent) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"param/{n}", p.detach().numpy()) for n, p in agent.named_parameters()
                       if n.startswith("lm."))


def restore_agent(agent: Agent, entries: Mapping[str, np.ndarray], adam: Optional[AdamState] = None,
                  partial: bool = False) -> None:
    """Copy checkpoint entries into ``agent`` (and ``adam``); schema-checked."""
    if "meta/kind" in entries:
        code = _scalar(entries["meta/kind"])
        if code != KIND_CODE[agent.kind]:
            found = [k.value for k, v in KIND_CODE.items() if v == code]
            raise CheckpointError(f"checkpoint holds a {found[0] if found else code} model, "
                                  f"not {agent.kind.value}")
    params = dict(agent.named_parameters())
    stored = {k[len("param/"):] for k in entries if k.startswith("param/")}
    missing = sorted(set(params) - stored)
    extra = sorted(stored - set(params))
    if extra or (missing and not partial):
        raise CheckpointError(f"checkpoint does not match a {agent.kind.value} agent: "
                              f"missing {missing[:5]}, unexpected {extra[:5]}")
    with torch.no_grad():
        for name in stored:
            arr = entries[f"param/{name}"]
            if tuple(arr.shape) != tuple(params[name].shape):
                raise CheckpointError(f"{name}: dims {list(arr.shape)} vs {list(params[name].shape)}")
            params[name].copy_(torch.from_numpy(arr))
    if adam is not None and "adam/t" in entries:
        adam.t = _scalar(entries["adam/t"])
        for name in adam.m:
            if f"adam.m/{name}" in entries:
                adam.m[name].copy_(torch.from_numpy(entries[f"adam.m/{name}"]))
                adam.v[name].copy_(torch.from_numpy(entries[f"adam.v/{name}"]))


def kind_of(entries: Mapping[str, np.ndarray]) -> ModelKind:
    if "meta/kind" not in entries:
        raise CheckpointError("checkpoint has no model kind entry")
    code = _scalar(entries["meta/kind"])
    for k, v in KIND_CODE.items():
        if v == code:
            return k
    raise CheckpointError(f"unknown model kind code {code}")


# -- metrics and transcripts -------------------------------------------------

METRIC_FIELDS = ("episode", "return", "length", "ma100", "loss_a", "loss_q", "syntax_err_rate")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and x != x:
        return ""
    return f"{float(x):.6f}"


class MetricsWriter:
    """Append-only metrics.csv, flushed after every row."""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(METRIC_FIELDS)
        self._f.flush()

    def write(self, row: Mapping) -> None:
        self._w.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TranscriptWriter:
    def __init__(self, path: str):
        self._f = open(path, "w")

    def write_episode(self, records: Iterable[dict]) -> None:
        for rec in records:
            self._f.write(json.dumps(rec) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str) -> Dict[str, list]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [r[k] for r in rows] for k in METRIC_FIELDS}
