"""File formats: tensor files, run manifests, and toy-parameter containers.

Tensor file: one ASCII header line ``DIFFMEL1 <channels> <frames> f32`` then
``channels * frames`` little-endian float32 values, row-major.
"""
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

MAGIC = "DIFFMEL1"
_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def tensor_bytes(x):
    x = np.asarray(x)
    if x.ndim != 2:
        raise FormatError(f"tensor files hold [channels, frames] matrices, got shape {x.shape}")
    header = f"{MAGIC} {x.shape[0]} {x.shape[1]} f32\n".encode("ascii")
    return header + np.ascontiguousarray(x, dtype=_DTYPE).tobytes()


def write_tensor(path, x):
    Path(path).write_bytes(tensor_bytes(x))


def parse_tensor(data):
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    parts = data[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != MAGIC:
        raise FormatError(f"bad tensor header {data[:nl]!r}")
    if parts[3] != "f32":
        raise FormatError(f"unsupported dtype {parts[3]!r}")
    channels, frames = int(parts[1]), int(parts[2])
    payload = data[nl + 1:]
    if len(payload) != channels * frames * _DTYPE.itemsize:
        raise FormatError(
            f"payload is {len(payload)} bytes, header implies {channels * frames * 4}")
    return np.frombuffer(payload, dtype=_DTYPE).reshape(channels, frames).copy()


def read_tensor(path):
    return parse_tensor(Path(path).read_bytes())


# -- manifests ----------------------------------------------------------------

def format_manifest(fields):
    return "".join(f"{k} = {v}\n" for k, v in fields.items())


def parse_manifest(text):
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"bad manifest line {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def write_manifest(path, fields):
    fields = dict(fields)
    fields.setdefault("timestamp", datetime.now(timezone.utc).isoformat(timespec="seconds"))
    Path(path).write_text(format_manifest(fields))


def read_manifest(path):
    return parse_manifest(Path(path).read_text())


# -- toy denoiser parameters --------------------------------------------------

def save_toy_params(stem, params):
    """``<stem>.mel`` holds all arrays flattened into one row; ``<stem>.shapes`` the layout."""
    stem = Path(stem)
    write_tensor(stem.with_suffix(".mel"), params.flat()[None, :])
    lines = {
        "channels": params.channels, "context_dim": params.context_dim,
        "emb_dim": params.emb_dim, "hidden": params.hidden,
        "layers": ";".join(f"{w.shape[0]}x{w.shape[1]}" for w in params.weights),
    }
    stem.with_suffix(".shapes").write_text(format_manifest(lines))


def load_toy_params(stem):
    from .denoiser import ToyDenoiserParams

    stem = Path(stem)
    meta = parse_manifest(stem.with_suffix(".shapes").read_text())
    flat = read_tensor(stem.with_suffix(".mel"))[0].astype(np.float64)
    shapes = [tuple(int(v) for v in s.split("x")) for s in meta["layers"].split(";")]
    expected = sum(a * b + b for a, b in shapes)
    if flat.size != expected:
        raise FormatError(f"parameter file has {flat.size} values, layout needs {expected}")
    params = ToyDenoiserParams(
        int(meta["channels"]), int(meta["context_dim"]), int(meta["emb_dim"]),
        [np.zeros(s) for s in shapes], [np.zeros(s[1]) for s in shapes], int(meta["hidden"]))
    params.set_flat(flat)
    return params
