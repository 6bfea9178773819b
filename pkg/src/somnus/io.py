"""On-disk formats for posterior draws, JSON reports and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .model import Layout

DRAWS_MANIFEST = "manifest.json"
STAT_KEYS = ("accept_stat", "n_leapfrog", "tree_depth", "divergent", "energy", "lp")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(obj):
    """Make numpy scalars and non-finite floats JSON-safe."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n"


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, obj) -> None:
    _parent(path).write_text(dumps_json(obj))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, rows: list[dict], fieldnames: Optional[list[str]] = None) -> None:
    rows = _clean(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fieldnames})
    _parent(path).write_text(buf.getvalue())


# -- posterior draws ---------------------------------------------------------------

def save_draws(draws, directory, fmt: str = "npy", extra: Optional[dict] = None) -> list[Path]:
    """Write draws to ``directory`` as ``draws.npy`` or ``draws.csv`` plus a manifest.

    Sample statistics go to one ``stat_<name>.npy`` file each; plain ``.npy``
    output is byte-stable across runs, unlike zip archives.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    names = draws.layout.names()
    C, S, D = draws.draws.shape
    if fmt == "npy":
        p = d / "draws.npy"
        np.save(p, np.ascontiguousarray(draws.draws))
    elif fmt == "csv":
        p = d / "draws.csv"
        with open(p, "w", newline="") as fh:
            fh.write(",".join(["chain", "draw"] + names) + "\n")
            for c in range(C):
                for s in range(S):
                    fh.write(f"{c},{s}," + ",".join(repr(float(v)) for v in draws.draws[c, s]) + "\n")
    else:
        raise ValueError(f"unknown draws format {fmt!r}")
    written.append(p)
    for key in STAT_KEYS:
        if key in draws.sample_stats:
            q = d / f"stat_{key}.npy"
            np.save(q, np.ascontiguousarray(draws.sample_stats[key]))
            written.append(q)
    manifest = {
        "format": fmt,
        "n_chains": C,
        "n_samples": S,
        "dim": D,
        "n_patients": draws.layout.n_patients,
        "n_factors": draws.layout.n_factors,
        "patient_ids": list(draws.patient_ids),
        "seed": draws.seed,
        "step_size": None if draws.step_size is None else np.asarray(draws.step_size).tolist(),
        "inv_mass": None if draws.inv_mass is None else np.asarray(draws.inv_mass).tolist(),
        "warnings": list(draws.warnings),
        "parameter_names": names,
    }
    if extra:
        manifest.update(extra)
    m = d / DRAWS_MANIFEST
    write_json(m, manifest)
    written.append(m)
    return written


def load_draws(directory):
    """Inverse of :func:`save_draws`."""
    from .sampler import PosteriorDraws

    d = Path(directory)
    mpath = d / DRAWS_MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no draws manifest in {d}")
    man = read_json(mpath)
    layout = Layout(int(man["n_patients"]), int(man["n_factors"]))
    shape = (int(man["n_chains"]), int(man["n_samples"]), int(man["dim"]))
    if layout.dim != shape[2]:
        raise ValueError("draws manifest dimension does not match its layout")
    if man["format"] == "npy":
        arr = np.load(d / "draws.npy")
    elif man["format"] == "csv":
        raw = np.loadtxt(d / "draws.csv", delimiter=",", skiprows=1, ndmin=2)
        arr = raw[:, 2:].reshape(shape)
    else:
        raise ValueError(f"unknown draws format {man['format']!r}")
    if arr.shape != shape:
        raise ValueError(f"draws have shape {arr.shape}, manifest says {shape}")
    stats = {}
    for key in STAT_KEYS:
        q = d / f"stat_{key}.npy"
        if q.exists():
            stats[key] = np.load(q)
    step = None if man.get("step_size") is None else np.asarray(man["step_size"])
    inv_mass = None if man.get("inv_mass") is None else np.asarray(man["inv_mass"])
    return PosteriorDraws(arr, layout, list(man["patient_ids"]), stats, step, inv_mass, man.get("seed"),
                          list(man.get("warnings", [])))


def draws_files(directory) -> list[Path]:
    """Files that make up a saved draws directory."""
    d = Path(directory)
    man = read_json(d / DRAWS_MANIFEST)
    files = [d / DRAWS_MANIFEST, d / ("draws.npy" if man["format"] == "npy" else "draws.csv")]
    files += sorted(p for p in d.glob("stat_*.npy"))
    return files


# -- run manifests -----------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to replay one CLI invocation."""

    subcommand: str
    argv: list[str]
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    version: str = ""
    timings: dict = field(default_factory=dict)

    def add_inputs(self, paths: Iterable) -> None:
        for p in paths:
            self.inputs[os.fspath(p)] = sha256_file(p)

    def add_outputs(self, paths: Iterable) -> None:
        for p in paths:
            self.outputs[os.fspath(p)] = sha256_file(p)

    def to_json(self) -> dict:
        return _clean(asdict(self))

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        return cls(**{k: obj[k] for k in ("subcommand", "argv", "config", "inputs", "outputs", "seeds",
                                         "version", "timings") if k in obj})

    def write(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(read_json(path))
