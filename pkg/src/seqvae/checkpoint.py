"""Versioned binary checkpoints with exact float round-trip.

Layout: 8-byte magic, little-endian u32 format version, little-endian u64
JSON-header length, the JSON header, then the raw little-endian float64
array payload in header order. The header carries the array manifest,
training state, optimizer state scalars, random-stream states, and a
digest of the run configuration so drift is detected on resume.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .training import TrainState

MAGIC = b"SVAECKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_digest(config_dict: dict) -> str:
    """Stable digest of a run configuration.

    Output paths and the epoch budget are excluded: extending a run past
    its original epoch count is the point of resuming.
    """
    payload = {k: v for k, v in sorted(config_dict.items())
               if k not in ("out_dir", "resume", "max_epochs")}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: Path, *, config_dict: dict, epoch: int,
                    theta: dict[str, np.ndarray], phi: dict[str, np.ndarray],
                    opt_theta_state: dict, opt_phi_state: dict,
                    rng_states: dict, train_state: TrainState,
                    history: list[dict]) -> None:
    arrays: dict[str, np.ndarray] = {}
    for group, params in (("theta", theta), ("phi", phi)):
        for name, arr in params.items():
            arrays[f"{group}.{name}"] = np.asarray(arr, dtype=np.float64)
    opt_meta = {}
    for group, opt_state in (("theta", opt_theta_state), ("phi", opt_phi_state)):
        meta = {"kind": opt_state["kind"]}
        if opt_state["kind"] == "adam":
            meta["t"] = opt_state["t"]
            for slot in ("m", "v"):
                for name, arr in opt_state[slot].items():
                    arrays[f"opt.{group}.{slot}.{name}"] = np.asarray(
                        arr, dtype=np.float64)
        opt_meta[group] = meta

    manifest = [{"name": name, "shape": list(arr.shape)}
                for name, arr in arrays.items()]
    header = {
        "version": VERSION,
        "config_digest": config_digest(config_dict),
        "config": config_dict,
        "epoch": epoch,
        "train_state": asdict(train_state),
        "optimizers": opt_meta,
        "rng_states": rng_states,
        "history": history,
        "manifest": manifest,
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: format version {version} needs migration "
                f"(this build reads version {VERSION})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len))
        arrays = {}
        for entry in header["manifest"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated array payload")
            arrays[entry["name"]] = np.frombuffer(
                buf, dtype="<f8").reshape(shape).copy()
    header["arrays"] = arrays
    return header


def split_arrays(header: dict) -> tuple[dict, dict, dict, dict]:
    """(theta, phi, opt_theta_state, opt_phi_state) from a loaded header."""
    theta, phi = {}, {}
    opt_states = {"theta": dict(header["optimizers"]["theta"]),
                  "phi": dict(header["optimizers"]["phi"])}
    for group in ("theta", "phi"):
        if opt_states[group]["kind"] == "adam":
            opt_states[group]["m"] = {}
            opt_states[group]["v"] = {}
    for name, arr in header["arrays"].items():
        if name.startswith("theta."):
            theta[name[len("theta."):]] = arr
        elif name.startswith("phi."):
            phi[name[len("phi."):]] = arr
        elif name.startswith("opt."):
            _, group, slot, pname = name.split(".", 3)
            opt_states[group][slot][pname] = arr
    return theta, phi, opt_states["theta"], opt_states["phi"]
