"""Binary checkpoints: magic 'FLAB', little-endian, bit-exact round trips.

Layout: 4-byte magic, u32 format version, u32 header length, JSON header
(array names/shapes plus free-form metadata), then the raw float64 payload
in header order. Loading validates structure and payload size; mismatches
raise distinct exceptions so callers can tell corruption from skew.
"""

import json
import struct

import numpy as np

MAGIC = b"FLAB"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict):
    header = {
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()
        ],
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """-> (arrays, meta); raises a distinct error per failure mode."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    (header_len,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = data[12 + header_len :]
    expected = sum(
        int(np.prod(entry["shape"], dtype=np.int64)) for entry in header["arrays"]
    )
    if len(payload) != expected * 8:
        raise CorruptCheckpointError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected * 8}"
        )
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
        offset += count
    return arrays, header["meta"]


# -- policy-level helpers ----------------------------------------------------

def save_policy_checkpoint(path, policy, meta: dict, critic=None, normalizer=None):
    arrays = {}
    for name, arr in policy.theta.params.items():
        arrays[f"theta.{name}"] = arr
    for name, arr in policy.psi.params.items():
        arrays[f"psi.{name}"] = arr
    if critic is not None:
        for name, arr in critic.phi.params.items():
            arrays[f"phi.{name}"] = arr
    if normalizer is not None:
        arrays["value_norm.state"] = normalizer.state()
    meta = dict(meta)
    meta.setdefault("mode", policy.mode)
    meta["arch"] = policy.arch.to_dict()
    save_checkpoint(path, arrays, meta)


def load_policy_checkpoint(path):
    """-> (policy, critic | None, normalizer | None, meta)."""
    from . import nn
    from .mappo import Critic
    from .policy import CommPolicy, PolicyArch

    arrays, meta = load_checkpoint(path)
    arch = PolicyArch(**meta["arch"])
    policy = CommPolicy(arch, mode=meta.get("mode", "consmac"))
    policy.init_params(np.random.default_rng(0))
    try:
        policy.theta.load_values(
            {k[len("theta."):]: v for k, v in arrays.items() if k.startswith("theta.")}
        )
        policy.psi.load_values(
            {k[len("psi."):]: v for k, v in arrays.items() if k.startswith("psi.")}
        )
    except (KeyError, ValueError) as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    critic = None
    phi_arrays = {k[len("phi."):]: v for k, v in arrays.items() if k.startswith("phi.")}
    if phi_arrays:
        critic = Critic(arch).init_params(np.random.default_rng(0))
        try:
            critic.phi.load_values(phi_arrays)
        except (KeyError, ValueError) as exc:
            raise ShapeMismatchError(f"{path}: {exc}") from exc
    normalizer = None
    if "value_norm.state" in arrays:
        normalizer = nn.ValueNormalizer()
        normalizer.load(arrays["value_norm.state"])
    return policy, critic, normalizer, meta
