"""Binary array container (``FUPE``) and long-format CSV export.

Layout: a 16-byte header (magic ``FUPE``, uint32 format version, uint32
n_paths, uint32 n_steps; little endian), a uint32 length followed by a UTF-8
JSON block describing the arrays and grids, then the arrays as row-major
little-endian float64 in the order listed in the JSON block.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .market import MarketScenario, PathEnsemble

MAGIC = b"FUPE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_LEN = struct.Struct("<I")


class ContainerError(OSError):
    module = "cli_reporting"


def write_container(path, arrays: dict, meta: dict, n_paths: int, n_steps: int) -> Path:
    path = Path(path)
    layout = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape), "dtype": "<f8"})
    block = json.dumps({"arrays": layout, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n_paths, n_steps))
        fh.write(_LEN.pack(len(block)))
        fh.write(block)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def read_container(path) -> tuple[dict, dict, tuple[int, int]]:
    """Returns (arrays, meta, (n_paths, n_steps))."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _LEN.size:
        raise ContainerError(f"{path}: truncated container")
    magic, version, n_paths, n_steps = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a FUPE container")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (size,) = _LEN.unpack_from(data, _HEADER.size)
    start = _HEADER.size + _LEN.size
    info = json.loads(data[start : start + size])
    offset = start + size
    arrays = {}
    for entry in info["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ContainerError(f"{path}: array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    return arrays, info["meta"], (n_paths, n_steps)


def save_ensemble(ensemble: PathEnsemble, path) -> Path:
    arrays = {
        "times": ensemble.times,
        "drivers": ensemble.drivers,
        "asset_paths": ensemble.asset_paths,
        "deflator_paths": ensemble.deflator_paths,
        "aux_martingales": ensemble.aux_martingales,
    }
    meta = {"kind": "ensemble", "scenario": ensemble.scenario.to_dict(), "seed": ensemble.seed}
    return write_container(path, arrays, meta, ensemble.n_paths, ensemble.n_steps)


def load_ensemble(path) -> PathEnsemble:
    arrays, meta, (n_paths, _) = read_container(path)
    if meta.get("kind") != "ensemble":
        raise ContainerError(f"{path}: container does not hold a path ensemble")
    return PathEnsemble(
        scenario=MarketScenario.from_dict(meta["scenario"]),
        n_paths=n_paths,
        seed=int(meta["seed"]),
        times=arrays["times"],
        drivers=arrays["drivers"],
        asset_paths=arrays["asset_paths"],
        deflator_paths=arrays["deflator_paths"],
        aux_martingales=arrays["aux_martingales"],
    )


def save_field(field_, path, meta: dict | None = None) -> Path:
    arrays = {
        "x_grid": field_.x_grid,
        "times": field_.times,
        "time_index": np.asarray(field_.time_index, dtype=float),
        "U_values": field_.U_values,
        "Ux_values": field_.Ux_values,
    }
    info = {"kind": "utility_field", "provenance": field_.provenance}
    info.update(meta or {})
    return write_container(path, arrays, info, field_.n_paths, int(field_.time_index[-1]))


def load_field(path):
    from .utility import UtilityField

    arrays, meta, _ = read_container(path)
    if meta.get("kind") != "utility_field":
        raise ContainerError(f"{path}: container does not hold a utility field")
    return UtilityField.from_arrays(
        arrays["x_grid"],
        arrays["times"],
        arrays["time_index"].astype(np.intp),
        arrays["U_values"],
        arrays["Ux_values"],
        meta.get("provenance", {}),
    )


def field_to_csv(field_, path, paths=None) -> Path:
    """Long format: path, time, x, U, Ux (one row per node)."""
    path = Path(path)
    sel = range(field_.n_paths) if paths is None else paths
    u, ux, g = field_.U_values, field_.Ux_values, field_.x_grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "time", "x", "U", "Ux"])
        for p in sel:
            for j, t in enumerate(field_.times):
                for k in range(g.size):
                    w.writerow([p, repr(float(t)), repr(float(g[k])), repr(float(u[p, j, k])), repr(float(ux[p, j, k]))])
    return path


def cache_dir() -> Path | None:
    root = os.environ.get("FLOWUTIL_CACHE")
    return Path(root) if root else None


def cached_ensemble(scenario: MarketScenario, n_paths: int, seed: int, simulate) -> PathEnsemble:
    """Load the ensemble from FLOWUTIL_CACHE when present; otherwise simulate and store it."""
    root = cache_dir()
    if root is None:
        return simulate(scenario, n_paths, seed)
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"ens-{scenario.scenario_hash()}-{seed}-{n_paths}.fupe"
    if path.exists():
        try:
            return load_ensemble(path)
        except (ContainerError, KeyError, ValueError):
            path.unlink(missing_ok=True)
    ens = simulate(scenario, n_paths, seed)
    save_ensemble(ens, path)
    return ens
