"""File formats: datasets, ground truth, chains, latent sidecars and configs."""

from __future__ import annotations

import csv
import json
import math
import os
import re
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import DataError, InvalidParameter
from .fbm import GridSpec
from .sampler import ChainOutput, HmcConfig, MassMatrix
from .sv_model import PARAM_NAMES, Dataset, SimulationResult, Theta

Z_MAGIC = b"FVZ1"
Z_HEADER = struct.Struct("<4sIII")  # magic, N, thin, reserved

TIME_UNITS = ("grid", "absolute")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"cannot open {path}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    return [h.strip() for h in rows[0]], [r for r in rows[1:] if any(c.strip() for c in r)]


def to_float(cell: str, what: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    try:
        return float(cell)
    except ValueError as exc:
        raise DataError(f"cannot parse {what} value {cell!r}") from exc


# --- datasets -------------------------------------------------------------

def write_dataset_csv(path, data: Dataset, time_unit: str = "absolute") -> None:
    """Header ``t,log_price[,vol_proxy]``; a ``t = 0`` row carries the initial price."""
    if time_unit not in TIME_UNITS:
        raise InvalidParameter(f"time_unit must be one of {TIME_UNITS}")
    scale = data.grid.mesh if time_unit == "absolute" else 1
    header = ["t", "log_price"] + (["vol_proxy"] if data.has_proxies else [])
    rows = [[0 if time_unit == "grid" else 0.0, data.y0] + ([None] if data.has_proxies else [])]
    for k, idx in enumerate(data.obs_index):
        t = int(idx) if time_unit == "grid" else idx * scale
        row = [t, data.y[k]]
        if data.has_proxies:
            row.append(data.proxies[k])
        rows.append(row)
    write_rows(path, header, rows)


def read_dataset_csv(path, mesh: float = 1.0, time_unit: str = "grid",
                     n_steps: Optional[int] = None, tau: float = 0.05,
                     columns: Optional[dict] = None) -> Dataset:
    """Read a dataset CSV onto a grid of width ``mesh``.

    With ``time_unit="grid"`` the ``t`` column holds grid indices; with
    ``"absolute"`` it holds times, which must fall on multiples of ``mesh``.
    ``columns`` maps the logical names ``t``, ``log_price`` and
    ``vol_proxy`` to the file's header names.
    """
    if time_unit not in TIME_UNITS:
        raise InvalidParameter(f"time_unit must be one of {TIME_UNITS}")
    cols = {"t": "t", "log_price": "log_price", "vol_proxy": "vol_proxy"}
    cols.update(columns or {})
    header, rows = read_rows(path)
    try:
        it, iy = header.index(cols["t"]), header.index(cols["log_price"])
    except ValueError as exc:
        raise DataError(f"{path}: missing required column ({exc})") from exc
    ip = header.index(cols["vol_proxy"]) if cols["vol_proxy"] in header else None
    t = np.array([to_float(r[it], "t") for r in rows])
    y = np.array([to_float(r[iy], "log_price") for r in rows])
    p = np.array([to_float(r[ip], "vol_proxy") if ip is not None and ip < len(r) else math.nan
                  for r in rows])
    if np.any(np.isnan(t)) or np.any(np.isnan(y)):
        raise DataError(f"{path}: t and log_price must be filled on every row")
    pos = t / mesh if time_unit == "absolute" else t
    idx = np.round(pos)
    if np.any(np.abs(pos - idx) > 1e-6 * np.maximum(1.0, np.abs(pos))):
        raise DataError(f"{path}: observation times do not fall on the grid of mesh {mesh}")
    idx = idx.astype(np.int64)
    y0 = 0.0
    if idx.size and idx[0] == 0:
        y0, idx, y, p = y[0], idx[1:], y[1:], p[1:]
    if idx.size == 0:
        raise DataError(f"{path}: no observations")
    grid = GridSpec(int(n_steps) if n_steps else int(idx.max()), mesh)
    proxies = p if np.any(np.isfinite(p)) else None
    return Dataset(grid, idx, y, y0, proxies, tau)


def write_truth_csv(path, sim: SimulationResult) -> None:
    """Ground truth ``t,x,z_index,z``: the path on rows ``0..N``, latents on ``0..2N-1``."""
    grid = sim.data.grid
    n_rows = max(grid.n_steps + 1, sim.z.size)
    times = grid.times
    rows = []
    for j in range(n_rows):
        on_path = j <= grid.n_steps
        rows.append([times[j] if on_path else None, sim.x[j] if on_path else None,
                     j if j < sim.z.size else None, sim.z[j] if j < sim.z.size else None])
    write_rows(path, ["t", "x", "z_index", "z"], rows)


def read_truth_csv(path):
    header, rows = read_rows(path)
    arr = np.array([[to_float(c, "truth") for c in r] for r in rows])
    x = arr[~np.isnan(arr[:, 1]), 1]
    z = arr[~np.isnan(arr[:, 3]), 3]
    return x, z


def write_fbm_csv(path, mesh: float, db: np.ndarray) -> None:
    b = np.concatenate([[0.0], np.cumsum(db)])
    rows = [[0.0, None, 0.0]] + [[(j + 1) * mesh, db[j], b[j + 1]] for j in range(db.size)]
    write_rows(path, ["t", "dB", "B"], rows)


# --- chains ---------------------------------------------------------------

CHAIN_COLUMNS = ("iter", "accept", "delta_h") + PARAM_NAMES


def write_chain_csv(path, chain: ChainOutput) -> None:
    """One row per retained iteration in natural coordinates.

    Gibbs runs record the path block in ``accept``/``delta_h`` and add
    ``accept_theta``/``delta_h_theta``; monitored latent coordinates follow
    as ``z<index>`` columns.
    """
    gibbs = chain.accept.shape[1] == 2
    header = list(CHAIN_COLUMNS)
    if gibbs:
        header += ["accept_theta", "delta_h_theta"]
    header += [f"z{j}" for j in chain.monitor_index]
    thin = chain.config.thin
    rows = []
    for i in range(thin - 1, chain.n_iterations, thin):
        row = [i + 1, chain.accept[i, 0], chain.delta_h[i, 0], *chain.theta[i]]
        if gibbs:
            row += [chain.accept[i, 1], chain.delta_h[i, 1]]
        row += list(chain.z_monitor[i])
        rows.append(row)
    write_rows(path, header, rows)


def manifest_path(chain_path) -> Path:
    return Path(chain_path).with_suffix(".json")


def load_chain(path) -> ChainOutput:
    """Rebuild a :class:`ChainOutput` from a chain CSV and its manifest, if present."""
    header, rows = read_rows(path)
    missing = [c for c in CHAIN_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: not a chain file (missing {missing})")
    arr = np.array([[to_float(c, "chain") for c in r] for r in rows]).reshape(len(rows), len(header))
    col = {h: i for i, h in enumerate(header)}
    theta = arr[:, [col[n] for n in PARAM_NAMES]]
    blocks = ["accept"] + (["accept_theta"] if "accept_theta" in col else [])
    dh = ["delta_h"] + (["delta_h_theta"] if "delta_h_theta" in col else [])
    zcols = [h for h in header if h.startswith("z") and h[1:].isdigit()]
    meta = {}
    mpath = manifest_path(path)
    if mpath.exists():
        meta = json.loads(mpath.read_text())
    n = arr.shape[0]
    sampler = meta.get("sampler", {})
    cfg_keys = {k: sampler[k] for k in ("step_size", "horizon", "variant", "update_mode", "seed")
                if k in sampler}
    config = HmcConfig(n_iterations=n, **cfg_keys)
    wall = meta.get("sampling_seconds")
    timing = np.full(n, wall / n if wall is not None and n else math.nan)
    mass = MassMatrix(meta["mass"]) if "mass" in meta else MassMatrix.identity(len(PARAM_NAMES))
    u = np.array([Theta.from_array(t).to_unconstrained() for t in theta]).reshape(n, -1)
    return ChainOutput(
        theta=theta, u=u, accept=arr[:, [col[b] for b in blocks]].astype(bool),
        delta_h=arr[:, [col[d] for d in dh]], timing=timing,
        z_monitor=arr[:, [col[z] for z in zcols]],
        monitor_index=np.array([int(z[1:]) for z in zcols], dtype=np.int64),
        config=config, mass=mass, dataset_id=meta.get("dataset_id", ""),
        n_grad=meta.get("n_grad", 0),
    )


def write_z_sidecar(path, draws: np.ndarray, thin: int) -> None:
    """Binary latent draws: 16-byte header then little-endian float64 records."""
    draws = np.ascontiguousarray(draws, dtype="<f8")
    if draws.ndim != 2 or draws.shape[1] % 2:
        raise InvalidParameter("latent draws must be a 2-d array with an even record length")
    with open(path, "wb") as fh:
        fh.write(Z_HEADER.pack(Z_MAGIC, draws.shape[1] // 2, thin, 0))
        fh.write(draws.tobytes())


def read_z_sidecar(path):
    """Return ``(draws, thin)`` from a sidecar written by :func:`write_z_sidecar`."""
    raw = Path(path).read_bytes()
    if len(raw) < Z_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, n, thin, _ = Z_HEADER.unpack_from(raw)
    if magic != Z_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f8", offset=Z_HEADER.size)
    if body.size % (2 * n):
        raise DataError(f"{path}: payload is not a whole number of records")
    return body.reshape(-1, 2 * n).astype(float), thin


# --- configs --------------------------------------------------------------

class _ConfigLoader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style numbers as floats (YAML 1.2)."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."))


def parse_yaml(text):
    return yaml.load(text, Loader=_ConfigLoader)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = parse_yaml(fh)
    except FileNotFoundError as exc:
        raise InvalidParameter(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise InvalidParameter(f"config file {path} is not valid YAML: {exc}") from exc
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise InvalidParameter("config file must hold a mapping")
    return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_yaml(path, cfg: dict) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(cfg), sort_keys=True))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + os.linesep)
