"""Binary container for learnable prompt tokens.

Layout::

    b"ZSADPRM\\0"            8-byte magic
    uint32 little-endian      header length in bytes
    JSON header (UTF-8)       version, E, D_t, seed, metadata, array table
    array payloads            little-endian float32, C order, in table order

The header is written with sorted keys and no timestamps so identical states
serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import AssetError, FormatError
from .prompts import CHECKPOINT_VERSION, LearnablePromptState

MAGIC = b"ZSADPRM\0"
_DTYPE = "<f4"


def save_checkpoint(path: str | Path, state: LearnablePromptState, metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    arrays = {
        "T_n": state.T_n.detach().cpu().numpy().astype(_DTYPE),
        "T_a": state.T_a.detach().cpu().numpy().astype(_DTYPE),
    }
    table, offset = [], 0
    for name, arr in arrays.items():
        table.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE, "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "version": state.version,
        "E": state.E,
        "D_t": state.D_t,
        "seed": state.seed,
        "arrays": table,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise AssetError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path} is not a prompt checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    return header, raw[12 + n :]


def load_checkpoint(
    path: str | Path, expected_E: int | None = None, expected_D_t: int | None = None
) -> tuple[LearnablePromptState, dict[str, Any]]:
    """Return the stored state and its metadata dict."""
    header, payload = read_header(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    E, D_t = header["E"], header["D_t"]
    if expected_E is not None and E != expected_E:
        raise FormatError(f"{path}: checkpoint has E={E}, expected {expected_E}")
    if expected_D_t is not None and D_t != expected_D_t:
        raise FormatError(f"{path}: checkpoint has D_t={D_t}, expected {expected_D_t}")
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] != _DTYPE:
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']}")
        if entry["shape"] != [E, D_t]:
            raise FormatError(f"{path}: array {entry['name']} has shape {entry['shape']}, header says {[E, D_t]}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=_DTYPE).reshape(entry["shape"])
    if set(arrays) != {"T_n", "T_a"}:
        raise FormatError(f"{path}: expected arrays T_n and T_a, found {sorted(arrays)}")
    state = LearnablePromptState(
        torch.from_numpy(arrays["T_n"].astype(np.float32)),
        torch.from_numpy(arrays["T_a"].astype(np.float32)),
        seed=header["seed"],
        version=header["version"],
    )
    return state, header.get("metadata", {})
