"""Tensor container files shared by checkpoints, datasets and sample sets.

Layout: one UTF-8 JSON header line whose first key is ``format_version``,
listing ``{name, shape, dtype}`` per tensor in payload order, then the
concatenated row-major little-endian float64 payloads.
"""
from __future__ import annotations

import json
import os
from typing import Dict, Optional

import numpy as np

from .experts import ExpertBank
from .networks import MLP, MlpSpec

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def save_container(path, tensors: Dict[str, np.ndarray], kind: str, meta: Optional[dict] = None) -> None:
    manifest = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "f64"})
        payloads.append(arr.tobytes(order="C"))
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "tensors": manifest}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=False).encode("utf-8") + b"\n")
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def load_container(path, kind: Optional[str] = None):
    """Read a container; returns ``(tensors, header)``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header") from exc
        if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}"
                              if isinstance(header, dict) else f"{path}: bad header")
        if kind is not None and header.get("kind") != kind:
            raise FormatError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
        tensors = {}
        for entry in header["tensors"]:
            if entry.get("dtype") != "f64":
                raise FormatError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            blob = fh.read(8 * count)
            if len(blob) != 8 * count:
                raise FormatError(f"{path}: truncated payload for {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return tensors, header


def save_dataset(path, x0: np.ndarray, y: Optional[np.ndarray] = None, meta: Optional[dict] = None) -> None:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0.reshape(-1, 1)
    tensors = {"x0": x0}
    if y is not None:
        tensors["y"] = np.asarray(y, dtype=np.float64)
    save_container(path, tensors, "dataset", meta)


def load_dataset(path):
    tensors, header = load_container(path, "dataset")
    y = tensors.get("y")
    return tensors["x0"], (None if y is None else y.astype(np.int64)), header


def save_network(path, net, role: str, meta: Optional[dict] = None) -> None:
    """Checkpoint an :class:`~gdl.networks.MLP` with its spec in the header."""
    save_container(path, net.state_dict(), "checkpoint", {"role": role, "spec": net.spec.to_dict(), **(meta or {})})


def load_network(path, role: Optional[str] = None):
    """Rebuild an MLP checkpoint; returns ``(net, meta)``."""
    tensors, header = load_container(path, "checkpoint")
    meta = header["meta"]
    if role is not None and meta.get("role") != role:
        raise FormatError(f"{path}: expected a {role!r} checkpoint, found {meta.get('role')!r}")
    try:
        net = MLP(MlpSpec(**meta["spec"]))
        net.load_state_dict(tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint does not match its spec ({exc})") from None
    return net, meta


def save_bank(path, bank, meta: Optional[dict] = None) -> None:
    if bank.merged is not None:
        bank.unmerge()
    save_container(path, bank.state_dict(), "checkpoint",
                   {"role": "experts", "spec": bank.spec.to_dict(), "n_experts": bank.n_experts, "T": bank.T,
                    "rank": bank.rank, "alpha": bank.alpha, **(meta or {})})


def load_bank(path):
    """Rebuild an expert bank checkpoint; returns ``(bank, meta)``."""
    tensors, header = load_container(path, "checkpoint")
    meta = header["meta"]
    if meta.get("role") != "experts":
        raise FormatError(f"{path}: expected an 'experts' checkpoint, found {meta.get('role')!r}")
    try:
        bank = ExpertBank(MLP(MlpSpec(**meta["spec"])), meta["n_experts"], meta["T"], rank=meta["rank"],
                          alpha=meta["alpha"])
        bank.load_state_dict(tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint does not match its spec ({exc})") from None
    return bank, meta
