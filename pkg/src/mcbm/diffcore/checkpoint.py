"""JSON parameter checkpoints with base64 little-endian float64 payloads."""

from __future__ import annotations

import base64
from typing import Any, Mapping

import numpy as np

from .nn import Parameter
from .optim import OptimizerState

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def encode_array(arr: np.ndarray) -> dict[str, Any]:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "values": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: Mapping[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["values"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt array payload: {exc}") from exc
    if len(raw) % 8:
        raise CheckpointError(f"corrupt array payload: {len(raw)} bytes is not a whole number of float64 values")
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"payload has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float64)


def dump_state(
    params: Mapping[str, Parameter], master_seed: int, optimizer: OptimizerState | None = None
) -> dict[str, Any]:
    moments = optimizer.moments if optimizer is not None else {}
    out: dict[str, Any] = {
        "header": {
            "format_version": FORMAT_VERSION,
            "master_seed": int(master_seed),
            "step_count": optimizer.step_count if optimizer is not None else 0,
        },
        "parameters": {},
    }
    for name, p in params.items():
        entry = encode_array(p.data)
        entry["moments"] = {k: encode_array(v) for k, v in moments.get(name, {}).items()}
        out["parameters"][name] = entry
    if optimizer is not None:
        out["optimizer"] = {
            k: getattr(optimizer, k)
            for k in ("kind", "learning_rate", "momentum", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps")
        }
    return out


def check_header(state: Mapping[str, Any]) -> dict[str, Any]:
    header = state.get("header")
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointError("missing checkpoint header")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {header['format_version']} is not supported "
            f"(this build reads version {FORMAT_VERSION}); re-train or convert the file"
        )
    return header


def load_state(state: Mapping[str, Any]) -> tuple[dict[str, np.ndarray], OptimizerState | None, dict[str, Any]]:
    """Returns (name -> values, optimizer state or None, header)."""
    header = check_header(state)
    try:
        entries = state["parameters"]
    except KeyError as exc:
        raise CheckpointError("checkpoint has no parameters section") from exc
    values = {name: decode_array(e) for name, e in entries.items()}
    optimizer = None
    if "optimizer" in state:
        optimizer = OptimizerState(**state["optimizer"])
        optimizer.step_count = int(header.get("step_count", 0))
        optimizer.moments = {
            name: {k: decode_array(v) for k, v in e.get("moments", {}).items()}
            for name, e in entries.items()
            if e.get("moments")
        }
    return values, optimizer, header
