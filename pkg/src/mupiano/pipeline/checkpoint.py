"""Versioned binary checkpoints with bitwise-stable serialization.

Layout (little-endian):

  bytes 0..3    magic b"MPCK"
  bytes 4..7    format version (u32)
  bytes 8..15   header length in bytes (u64)
  header        UTF-8 JSON with sorted keys:
                  stage, config_fingerprint, meta (free-form),
                  arrays: [{name, dtype, shape, offset}]
  payload       raw C-order array bytes at the stated offsets

Arrays are written in sorted name order, so identical content always
produces identical bytes. Torch modules, Adam optimizer state and RNG
states round-trip through the helpers below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MPCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable file or format version mismatch."""


@dataclass
class Checkpoint:
    stage: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    version: int = VERSION


def save(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.arrays)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name])
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({
        "stage": ckpt.stage,
        "config_fingerprint": ckpt.config_fingerprint,
        "meta": ckpt.meta,
        "arrays": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(4, "little"))
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this build reads {VERSION}")
    hlen = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + hlen].decode())
    payload = data[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(stage=header["stage"], arrays=arrays, meta=header["meta"],
                      config_fingerprint=header["config_fingerprint"],
                      version=version)


# ---------------------------------------------------------------------------
# torch adapters

def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module,
                arrays: dict[str, np.ndarray]) -> None:
    sd = {}
    plen = len(prefix) + 1
    for k, v in arrays.items():
        if k.startswith(prefix + "."):
            sd[k[plen:]] = torch.as_tensor(v.copy())
    missing = set(module.state_dict()) - set(sd)
    if missing:
        raise CheckpointError(f"{prefix}: missing tensors {sorted(missing)}")
    module.load_state_dict(sd)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Arrays plus JSON-safe param-group metadata for an optimizer."""
    arrays: dict[str, np.ndarray] = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, val in state.items():
            tag = f"{prefix}.state.{idx}.{key}"
            if torch.is_tensor(val):
                arrays[tag] = val.detach().cpu().numpy().copy()
            else:
                arrays[tag] = np.asarray(val)
    meta = {"param_groups": [
        {k: v for k, v in g.items() if k != "params"} | {"n_params": len(g["params"])}
        for g in sd["param_groups"]]}
    return arrays, meta


def load_optimizer(prefix: str, opt: torch.optim.Optimizer,
                   arrays: dict[str, np.ndarray], meta: dict) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    plen = len(prefix) + 1
    for k, v in arrays.items():
        if not k.startswith(prefix + "."):
            continue
        _, idx, key = k[plen:].split(".", 2)
        entry = state.setdefault(int(idx), {})
        entry[key] = torch.as_tensor(v.copy()) if v.ndim else \
            (torch.as_tensor(v.copy()) if key != "step" else torch.as_tensor(v.copy()))
    start = 0
    groups = []
    for g_meta, g in zip(meta["param_groups"], sd["param_groups"]):
        n = g_meta["n_params"]
        new = {k: v for k, v in g_meta.items() if k != "n_params"}
        new["params"] = list(range(start, start + n))
        groups.append(new)
        start += n
    opt.load_state_dict({"state": state, "param_groups": groups})


def rng_arrays(prefix: str, rngs: dict[str, np.random.Generator]) -> tuple[dict, dict]:
    arrays = {f"{prefix}.torch": torch.get_rng_state().numpy().copy()}
    meta = {name: g.bit_generator.state for name, g in rngs.items()}
    return arrays, meta


def restore_rngs(prefix: str, arrays: dict, meta: dict,
                 rngs: dict[str, np.random.Generator]) -> None:
    torch.set_rng_state(torch.as_tensor(arrays[f"{prefix}.torch"].copy()))
    for name, g in rngs.items():
        g.bit_generator.state = meta[name]
