"""File formats: volumes (text header + raw payload), PGM slices, CSV,
series/result directory layouts.

Volume format
-------------
A volume is a pair of files: ``name.hdr`` (text, key=value lines) and the
raw payload it references::

    gdr-volume v1
    dims=64 64
    spacing=1.0 1.0
    origin=0.0 0.0
    element_type=float32
    axis_order=xy
    components=1
    data_file=name.raw

The payload is little-endian; the first axis (x) varies fastest and, for
vector fields, the component index is slowest (component-planar).  Images
and fields are float32, masks are uint8 holding only 0/1.  ``data_file`` is
relative to the header's directory, so result trees are relocatable.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .grid import GridGeometry, ScalarGrid, VectorGrid

MAGIC = "gdr-volume v1"
AXIS_NAMES = "xyz"


class VolumeFormatError(ValueError):
    """Base class for volume file problems."""


class MalformedHeaderError(VolumeFormatError):
    pass


class UnknownElementTypeError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    pass


class MaskValueError(VolumeFormatError):
    pass


_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


def write_volume(path, grid, element_type: str = "float32") -> None:
    """Write a ScalarGrid/VectorGrid as header + raw payload."""
    path = Path(path)
    if path.suffix != ".hdr":
        path = path.with_suffix(".hdr")
    if element_type not in _DTYPES:
        raise UnknownElementTypeError(f"unknown element type {element_type!r}")
    geo = grid.geometry
    components = 1 if isinstance(grid, ScalarGrid) else geo.ndim
    raw_name = path.with_suffix(".raw").name
    values = grid.values
    if element_type == "uint8":
        if not np.all(np.isin(values, (0.0, 1.0))):
            bad = values[~np.isin(values, (0.0, 1.0))][0]
            raise MaskValueError(f"uint8 volumes must hold only 0/1, found {bad}")
    payload = np.asarray(values, dtype=_DTYPES[element_type]).ravel(order="F").tobytes()
    lines = [
        MAGIC,
        "dims=" + " ".join(str(n) for n in geo.dims),
        "spacing=" + " ".join(repr(s) for s in geo.spacing),
        "origin=" + " ".join(repr(o) for o in geo.origin),
        f"element_type={element_type}",
        f"axis_order={AXIS_NAMES[:geo.ndim]}",
        f"components={components}",
        f"data_file={raw_name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".raw").write_bytes(payload)


def _parse_header(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise MalformedHeaderError(f"cannot read header {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MAGIC:
        raise MalformedHeaderError(f"{path}: missing '{MAGIC}' magic line")
    fields = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise MalformedHeaderError(f"{path}: bad header line {ln!r}")
        key, _, value = ln.partition("=")
        fields[key.strip()] = value.strip()
    required = {
        "dims", "spacing", "origin", "element_type", "axis_order",
        "components", "data_file",
    }
    missing = required - fields.keys()
    if missing:
        raise MalformedHeaderError(f"{path}: missing header keys {sorted(missing)}")
    return fields


def read_volume(path):
    """Read a volume written by :func:`write_volume`.

    Returns a :class:`ScalarGrid` (components=1) or :class:`VectorGrid`.
    """
    path = Path(path)
    fields = _parse_header(path)
    try:
        dims = tuple(int(tok) for tok in fields["dims"].split())
        spacing = tuple(float(tok) for tok in fields["spacing"].split())
        origin = tuple(float(tok) for tok in fields["origin"].split())
        components = int(fields["components"])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc
    element_type = fields["element_type"]
    if element_type not in _DTYPES:
        raise UnknownElementTypeError(f"{path}: unknown element type {element_type!r}")
    if fields["axis_order"] != AXIS_NAMES[: len(dims)]:
        raise MalformedHeaderError(
            f"{path}: unsupported axis order {fields['axis_order']!r}"
        )
    geo = GridGeometry(dims, spacing, origin)
    if components not in (1, geo.ndim):
        raise MalformedHeaderError(f"{path}: components={components} unsupported")
    dtype = _DTYPES[element_type]
    raw_path = path.parent / fields["data_file"]
    data = raw_path.read_bytes()
    expected = geo.voxel_count * components * dtype.itemsize
    if len(data) != expected:
        raise PayloadSizeError(
            f"{raw_path}: expected {expected} bytes, found {len(data)}"
        )
    flat = np.frombuffer(data, dtype=dtype)
    if element_type == "uint8":
        if not np.all(np.isin(flat, (0, 1))):
            bad = int(flat[~np.isin(flat, (0, 1))][0])
            raise MaskValueError(f"{raw_path}: mask value {bad} is not 0/1")
    shape = dims if components == 1 else dims + (components,)
    values = flat.astype(float).reshape(shape, order="F")
    if components == 1:
        return ScalarGrid(geo, values)
    return VectorGrid(geo, values)


# ---------------------------------------------------------------------------
# PGM slice export

def export_slice(grid: ScalarGrid, path, axis: int | None = None,
                 index: int | None = None, window: tuple[float, float] | None = None) -> None:
    """16-bit PGM export with the window recorded in the comment line.

    For 3D grids pass ``axis``/``index`` to pick a plane; 2D grids export
    directly. Values map linearly from ``window`` to 0..65535 (clipped).
    """
    vals = grid.values
    if vals.ndim == 3:
        if axis is None or index is None:
            raise VolumeFormatError("3D grids need axis and index for slice export")
        vals = np.take(vals, index, axis=axis)
    elif vals.ndim != 2:
        raise VolumeFormatError("slice export needs a 2D or 3D scalar grid")
    if window is None:
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = float(window[0]), float(window[1])
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((vals - lo) / span, 0.0, 1.0)
    pixels = np.round(scaled * 65535.0).astype(">u2")
    width, height = pixels.shape  # axis 0 = x = columns
    header = f"P5\n# window {lo!r} {hi!r}\n{width} {height}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pixels.T.tobytes())  # rows = second axis


def read_pgm(path) -> tuple[np.ndarray, tuple[float, float]]:
    """Read back a PGM written by :func:`export_slice` (tests and tooling)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 4)
    if parts[0] != b"P5" or not parts[1].startswith(b"# window"):
        raise VolumeFormatError(f"{path}: not a package PGM file")
    lo, hi = (float(tok) for tok in parts[1].decode().split()[2:4])
    width, height = (int(tok) for tok in parts[2].split())
    if parts[3] != b"65535":
        raise VolumeFormatError(f"{path}: expected 16-bit PGM")
    pixels = np.frombuffer(parts[4], dtype=">u2", count=width * height)
    return pixels.reshape(height, width).T.astype(float), (lo, hi)


# ---------------------------------------------------------------------------
# CSV with a schema comment line

def write_csv(path, schema: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# gdr-csv {schema} v1\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# gdr-csv "):
            raise VolumeFormatError(f"{path}: missing csv schema line")
        schema = first.split()[2]
        reader = csv.reader(fh)
        header = next(reader)
        return schema, header, [row for row in reader]


# ---------------------------------------------------------------------------
# series / result directories

def write_landmarks_csv(path, points: np.ndarray) -> None:
    d = points.shape[1]
    write_csv(path, "landmarks", list("xyz"[:d]), [[repr(float(v)) for v in p] for p in points])


def read_landmarks_csv(path) -> np.ndarray:
    _, header, rows = read_csv(path)
    return np.array([[float(v) for v in row] for row in rows])


def save_series(out_dir, ts, truth=None) -> None:
    """Write a time series (and optional ground truth) into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_files, mask_files = [], []
    for i, (img, mask) in enumerate(zip(ts.images, ts.masks)):
        image_files.append(f"phase_{i:02d}.hdr")
        write_volume(out / image_files[-1], img, "float32")
        mask_files.append(f"mask_{i:02d}.hdr")
        binary = ScalarGrid(mask.geometry, (mask.values > 0.5).astype(float))
        write_volume(out / mask_files[-1], binary, "uint8")
    manifest = {
        "schema": "gdr-series-v1",
        "times": list(ts.times),
        "images": image_files,
        "masks": mask_files,
    }
    if truth is not None:
        tdir = out / "truth"
        tdir.mkdir(exist_ok=True)
        write_volume(tdir / "base_hu.hdr", truth.base_hu)
        write_volume(tdir / "displacement.hdr", truth.displacement)
        write_volume(tdir / "lung_mask.hdr",
                     ScalarGrid(truth.lung_mask.geometry,
                                (truth.lung_mask.values > 0.5).astype(float)),
                     "uint8")
        jac_files = []
        for i, jac in enumerate(truth.true_jacobians):
            jac_files.append(f"jac_{i:02d}.hdr")
            write_volume(tdir / jac_files[-1], jac)
        tinfo = {
            "schema": "gdr-truth-v1",
            "factors": list(truth.factors),
            "jacobians": jac_files,
            "meta": truth.meta,
        }
        if truth.landmarks_moving is not None:
            write_landmarks_csv(tdir / "landmarks_moving.csv", truth.landmarks_moving.points)
            write_landmarks_csv(
                tdir / "landmarks_reference.csv", truth.landmarks_reference.points
            )
            tinfo["landmarks"] = ["landmarks_moving.csv", "landmarks_reference.csv"]
        (tdir / "truth.json").write_text(json.dumps(tinfo, indent=2) + "\n")
        manifest["truth"] = "truth"
    (out / "series.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_series(series_dir):
    """Load a series directory; returns (TimeSeries, truth dict or None)."""
    from .regression import TimeSeries

    root = Path(series_dir)
    manifest = json.loads((root / "series.json").read_text())
    if manifest.get("schema") != "gdr-series-v1":
        raise VolumeFormatError(f"{root}: not a gdr series directory")
    images = [read_volume(root / f) for f in manifest["images"]]
    masks = [read_volume(root / f) for f in manifest["masks"]]
    ts = TimeSeries(images, masks, tuple(manifest["times"]))
    truth = None
    if "truth" in manifest:
        tdir = root / manifest["truth"]
        tinfo = json.loads((tdir / "truth.json").read_text())
        truth = {
            "factors": tuple(tinfo["factors"]),
            "base_hu": read_volume(tdir / "base_hu.hdr"),
            "displacement": read_volume(tdir / "displacement.hdr"),
            "lung_mask": read_volume(tdir / "lung_mask.hdr"),
            "jacobians": [read_volume(tdir / f) for f in tinfo["jacobians"]],
            "meta": tinfo.get("meta", {}),
        }
        if "landmarks" in tinfo:
            truth["landmarks_moving"] = read_landmarks_csv(tdir / tinfo["landmarks"][0])
            truth["landmarks_reference"] = read_landmarks_csv(tdir / tinfo["landmarks"][1])
    return ts, truth


def save_result(out_dir, result, config_echo: dict, times) -> None:
    """Write a RegressionResult into a directory (template, fits, Jacobians,
    flow fields at observation times, all velocities, cost history)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "template.hdr", result.template)
    files: dict[str, list[str] | str] = {"template": "template.hdr"}
    fits, jacs, fwd, inv = [], [], [], []
    obs_idx = result.flow.time_grid.obs_indices
    for i in range(len(result.fitted)):
        fits.append(f"fit_{i:02d}.hdr")
        write_volume(out / fits[-1], result.fitted[i])
        jacs.append(f"jac_inv_{i:02d}.hdr")
        write_volume(out / jacs[-1], result.jac_inv_obs[i])
        fwd.append(f"map_fwd_{i:02d}.hdr")
        write_volume(out / fwd[-1], result.flow.maps_fwd[obs_idx[i]])
        inv.append(f"map_inv_{i:02d}.hdr")
        write_volume(out / inv[-1], result.flow.maps_inv[obs_idx[i]])
    vels = []
    for j, v in enumerate(result.flow.velocities):
        vels.append(f"velocity_{j:03d}.hdr")
        write_volume(out / vels[-1], v)
    files.update(fits=fits, jac_inv=jacs, maps_fwd=fwd, maps_inv=inv, velocities=vels)
    write_csv(
        out / "cost_history.csv",
        "cost-history",
        ["level", "iteration", "metric", "data", "total"],
        [[lv, it, repr(float(m)), repr(float(d)), repr(float(t))]
         for lv, it, m, d, t in result.cost_history],
    )
    files["cost_history"] = "cost_history.csv"
    info = {
        "schema": "gdr-result-v1",
        "times": list(times),
        "converged": result.converged,
        "warnings": result.warnings,
        "diagnostics": {k: float(v) for k, v in result.flow.diagnostics.items()},
        "config": config_echo,
        "files": files,
    }
    (out / "result.json").write_text(json.dumps(info, indent=2) + "\n")


def load_result(result_dir) -> dict:
    root = Path(result_dir)
    info = json.loads((root / "result.json").read_text())
    if info.get("schema") != "gdr-result-v1":
        raise VolumeFormatError(f"{root}: not a gdr result directory")
    files = info["files"]
    out = dict(info)
    out["template"] = read_volume(root / files["template"])
    out["fits"] = [read_volume(root / f) for f in files["fits"]]
    out["jac_inv"] = [read_volume(root / f) for f in files["jac_inv"]]
    out["maps_fwd"] = [read_volume(root / f) for f in files["maps_fwd"]]
    out["maps_inv"] = [read_volume(root / f) for f in files["maps_inv"]]
    return out
