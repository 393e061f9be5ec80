"""Binary checkpoint files.

Layout: the magic ``CMLP1``, an 8-byte little-endian header length, a UTF-8 JSON header,
then raw little-endian float64 blobs in header order. The header lists every array with
its name, kind, shape, byte offset and byte length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from crowd_mlp.engine.tensor import Tensor
from crowd_mlp.log import debug_detail, logger
from crowd_mlp.model.config import make_model_config
from crowd_mlp.model.crowdmlp import CrowdMLP, build_model
from crowd_mlp.model.params import ParamStore
from crowd_mlp.training.optim import AdamState

MAGIC = b"CMLP1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")
_KINDS = ("param", "buffer", "adam_m", "adam_v")


class CheckpointError(RuntimeError):
    """Base class for checkpoint read and restore failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a checkpoint or its header is corrupt."""


class CheckpointVersionError(CheckpointError):
    """The file uses a format version this build cannot read."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the header or an array blob does."""


class CheckpointShapeError(CheckpointError):
    """A stored array does not fit the current model configuration."""

    def __init__(self, message: str, *, parameter: str) -> None:
        super().__init__(message)
        self.parameter = parameter


@dataclass
class Checkpoint:
    model_config: dict[str, Any]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: AdamState | None = None
    rng_state: dict[str, Any] | None = None
    epoch: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(
        cls,
        model: CrowdMLP,
        *,
        optimizer: AdamState | None = None,
        rng_state: dict[str, Any] | None = None,
        epoch: int = 0,
        metadata: dict[str, Any] | None = None,
    ) -> Checkpoint:
        return cls(
            model_config=model.config.model_dump(mode="json"),
            params={name: p.data.copy() for name, p in model.params.items()},
            buffers={name: b.copy() for name, b in model.buffers.items()},
            optimizer=optimizer,
            rng_state=rng_state,
            epoch=epoch,
            metadata=dict(metadata or {}),
        )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    tables: list[tuple[str, dict[str, np.ndarray]]] = [
        ("param", ckpt.params),
        ("buffer", ckpt.buffers),
    ]
    optimizer = None
    if ckpt.optimizer is not None:
        tables += [("adam_m", ckpt.optimizer.m), ("adam_v", ckpt.optimizer.v)]
        optimizer = {
            "step": ckpt.optimizer.step,
            "betas": list(ckpt.optimizer.betas),
            "eps": ckpt.optimizer.eps,
        }

    entries = []
    blobs = []
    offset = 0
    for kind, table in tables:
        for name, array in table.items():
            blob = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
            entries.append(
                {
                    "name": name,
                    "kind": kind,
                    "shape": list(np.shape(array)),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)

    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.model_config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer": optimizer,
        "metadata": ckpt.metadata,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as file:
        file.write(MAGIC)
        file.write(_LENGTH.pack(len(header_bytes)))
        file.write(header_bytes)
        for blob in blobs:
            file.write(blob)
    debug_detail(f"Saved checkpoint with {len(entries)} arrays to {target}")
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    try:
        raw = source.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {source}: {exc}") from exc

    if raw[: len(MAGIC)] != MAGIC:
        if raw and MAGIC.startswith(raw):
            raise CheckpointTruncatedError(f"{source}: file ends inside the magic bytes")
        raise CheckpointFormatError(f"{source}: not a CrowdMLP checkpoint (bad magic bytes)")
    cursor = len(MAGIC)
    if len(raw) < cursor + _LENGTH.size:
        raise CheckpointTruncatedError(f"{source}: file ends before the header length")
    (header_length,) = _LENGTH.unpack_from(raw, cursor)
    cursor += _LENGTH.size
    if len(raw) < cursor + header_length:
        raise CheckpointTruncatedError(f"{source}: file ends inside the header")
    try:
        header = json.loads(raw[cursor : cursor + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: header is not valid JSON") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointFormatError(f"{source}: header has no format_version")
    version = header["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    data = memoryview(raw)[cursor + header_length :]

    tables: dict[str, dict[str, np.ndarray]] = {kind: {} for kind in _KINDS}
    try:
        entries = list(header["arrays"])
        for entry in entries:
            name, kind = str(entry["name"]), str(entry["kind"])
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if kind not in tables:
                raise CheckpointFormatError(f"{source}: unknown array kind {kind!r} for {name}")
            if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
                raise CheckpointFormatError(f"{source}: byte length of {name} does not match shape")
            if offset < 0 or offset + nbytes > len(data):
                raise CheckpointTruncatedError(f"{source}: file ends inside array {name}")
            array = np.frombuffer(data[offset : offset + nbytes], dtype=_DTYPE)
            tables[kind][name] = array.reshape(shape).astype(np.float64, copy=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: malformed array table") from exc

    try:
        optimizer = None
        if header.get("optimizer"):
            meta = header["optimizer"]
            optimizer = AdamState(
                m=tables["adam_m"],
                v=tables["adam_v"],
                step=int(meta["step"]),
                betas=(float(meta["betas"][0]), float(meta["betas"][1])),
                eps=float(meta["eps"]),
            )
        return Checkpoint(
            model_config=dict(header.get("model_config") or {}),
            params=tables["param"],
            buffers=tables["buffer"],
            optimizer=optimizer,
            rng_state=header.get("rng_state"),
            epoch=int(header.get("epoch", 0)),
            metadata=dict(header.get("metadata") or {}),
            version=version,
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: malformed header field ({exc!r})") from exc


def restore_model(model: CrowdMLP, ckpt: Checkpoint) -> None:
    """Copy every parameter and buffer of ``ckpt`` into ``model`` in place.

    Names and shapes must match the model exactly; the first mismatch is reported by name.
    """
    _copy_arrays(model.params, model.buffers, ckpt, exact=True)


def load_model(path: str | Path) -> tuple[CrowdMLP, Checkpoint]:
    """Rebuild the model recorded in a checkpoint and restore its arrays."""
    ckpt = load_checkpoint(path)
    try:
        values = dict(ckpt.model_config)
        frontend = dict(values.get("frontend") or {})
        frontend["weights_path"] = None
        values["frontend"] = frontend
        config = make_model_config(**values)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: invalid stored model configuration: {exc}") from exc
    model = build_model(config)
    restore_model(model, ckpt)
    logger.info("Loaded checkpoint %s (epoch %d)", path, ckpt.epoch)
    return model, ckpt


def load_arrays_into(store: ParamStore, path: str | Path, *, prefix: str) -> int:
    """Copy the ``prefix``-named parameters and buffers of a checkpoint into ``store``."""
    ckpt = load_checkpoint(path)
    params = {n: p for n, p in store.params.items() if n.startswith(prefix)}
    buffers = {n: b for n, b in store.buffers.items() if n.startswith(prefix)}
    _copy_arrays(params, buffers, ckpt, exact=False)
    return len(params) + len(buffers)


def _copy_arrays(
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
    ckpt: Checkpoint,
    *,
    exact: bool,
) -> None:
    _check_table({n: p.shape for n, p in params.items()}, ckpt.params, "parameter", exact)
    _check_table({n: b.shape for n, b in buffers.items()}, ckpt.buffers, "buffer", exact)
    for name, param in params.items():
        param.data[...] = ckpt.params[name]
    for name, buffer in buffers.items():
        buffer[...] = ckpt.buffers[name]


def _check_table(
    shapes: dict[str, tuple[int, ...]],
    stored: dict[str, np.ndarray],
    label: str,
    exact: bool,
) -> None:
    for name, shape in shapes.items():
        if name not in stored:
            raise CheckpointShapeError(
                f"{label} {name!r} is missing from the checkpoint, "
                "which was saved under a different configuration",
                parameter=name,
            )
        if stored[name].shape != shape:
            raise CheckpointShapeError(
                f"{label} {name!r} has shape {stored[name].shape} in the checkpoint "
                f"but {shape} in the current configuration",
                parameter=name,
            )
    if exact:
        for name in stored:
            if name not in shapes:
                raise CheckpointShapeError(
                    f"{label} {name!r} in the checkpoint has no counterpart in the current model",
                    parameter=name,
                )
