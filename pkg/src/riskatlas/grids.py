"""Regular lon/lat grids, ESRI ASCII raster I/O, and the covariate stack.

Grid points are cell centers with inclusive endpoints on both axes; rows
run north to south. Rasters are plain ESRI ASCII (.asc) so any GIS tool
can open the outputs; sidecar ``.meta.json`` files carry provenance that
the format itself cannot hold.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .domain import DataError

DEFAULT_STEP = 30.0 / 3600.0
REAL_NODATA = -9999.0
STATUS_NODATA = -1

KIND_REAL = "real"
KIND_STATUS = "status-code"

_ALIGN_TOL = 1e-6


class GridMismatchError(ValueError):
    """Two layers that must share a grid do not."""


@dataclass(frozen=True)
class GridSpec:
    """Inclusive-endpoint regular sampling of a lon/lat box.

    Points per axis = round(extent / step) + 1; both endpoints are
    sampled, so a full [-180, 180] row carries the +180 duplicate of
    the -180 meridian unless dropped explicitly.
    """

    lon0: float
    lon1: float
    lat0: float
    lat1: float
    step: float = DEFAULT_STEP

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.lon1 <= self.lon0 or self.lat1 <= self.lat0:
            raise ValueError("ranges must satisfy lon1 > lon0 and lat1 > lat0")

    @property
    def ncols(self):
        return int(round((self.lon1 - self.lon0) / self.step)) + 1

    @property
    def nrows(self):
        return int(round((self.lat1 - self.lat0) / self.step)) + 1

    @property
    def n_points(self):
        return self.ncols * self.nrows

    def lons(self):
        return self.lon0 + np.arange(self.ncols) * self.step

    def lats(self):
        """Row-order latitudes, north to south."""
        return self.lat1 - np.arange(self.nrows) * self.step

    def lon_at(self, col):
        return self.lon0 + col * self.step

    def lat_at(self, row):
        return self.lat1 - row * self.step

    def nearest_cell(self, lon, lat):
        """(row, col) of the closest grid point, clipped to the grid."""
        col = int(round((lon - self.lon0) / self.step))
        row = int(round((self.lat1 - lat) / self.step))
        return min(max(row, 0), self.nrows - 1), min(max(col, 0), self.ncols - 1)

    def without_antimeridian(self):
        """Drop the trailing +180 column duplicating the -180 meridian."""
        if not (math.isclose(self.lon0, -180.0) and math.isclose(self.lon1, 180.0)):
            return self
        return GridSpec(self.lon0, self.lon1 - self.step, self.lat0, self.lat1, self.step)

    def offsets_in(self, other):
        """(row, col) offset of this grid inside covering grid ``other``.

        Both grids must share the step and align on the same lattice;
        ``other`` must cover this one.
        """
        if abs(self.step - other.step) > _ALIGN_TOL * self.step:
            raise GridMismatchError(f"step {self.step} does not match {other.step}")
        col_off = (self.lon0 - other.lon0) / self.step
        row_off = (other.lat1 - self.lat1) / self.step
        if abs(col_off - round(col_off)) > _ALIGN_TOL or abs(row_off - round(row_off)) > _ALIGN_TOL:
            raise GridMismatchError("grids are not aligned on one lattice")
        col_off, row_off = int(round(col_off)), int(round(row_off))
        if (
            col_off < 0
            or row_off < 0
            or col_off + self.ncols > other.ncols
            or row_off + self.nrows > other.nrows
        ):
            raise GridMismatchError("grid is not covered by the reference grid")
        return row_off, col_off

    def to_dict(self):
        return {
            "lon_range": [self.lon0, self.lon1],
            "lat_range": [self.lat0, self.lat1],
            "step": self.step,
        }


@dataclass(frozen=True)
class RasterLayer:
    """One value per grid point, row-major north-to-south.

    ``kind`` selects the on-disk representation: real values with 6
    significant digits, or integer status ranks.
    """

    grid: GridSpec
    values: np.ndarray
    nodata: float
    kind: str = KIND_REAL

    def __post_init__(self):
        if self.values.shape != (self.grid.nrows, self.grid.ncols):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.grid.nrows}, {self.grid.ncols})"
            )
        if self.kind not in (KIND_REAL, KIND_STATUS):
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def valid_mask(self):
        if self.kind == KIND_STATUS:
            return self.values != int(self.nodata)
        return self.values != self.nodata

    def crop(self, sub):
        """Restrict to covered sub-grid ``sub`` (same lattice)."""
        row_off, col_off = sub.offsets_in(self.grid)
        return RasterLayer(
            grid=sub,
            values=self.values[row_off : row_off + sub.nrows, col_off : col_off + sub.ncols],
            nodata=self.nodata,
            kind=self.kind,
        )


def format_ascii_value(value, kind):
    if kind == KIND_STATUS:
        return str(int(value))
    return f"{value:.6g}"


def write_ascii_header(fh, grid, nodata, kind):
    xll = grid.lon0 - grid.step / 2.0
    yll = grid.lat0 - grid.step / 2.0
    fh.write(f"ncols {grid.ncols}\n")
    fh.write(f"nrows {grid.nrows}\n")
    fh.write(f"xllcorner {xll:.10g}\n")
    fh.write(f"yllcorner {yll:.10g}\n")
    fh.write(f"cellsize {grid.step:.10g}\n")
    fh.write(f"NODATA_value {format_ascii_value(nodata, kind)}\n")


def write_ascii_rows(fh, rows, kind):
    for row in rows:
        fh.write(" ".join(format_ascii_value(v, kind) for v in row))
        fh.write("\n")


def write_ascii(layer, path, meta=None):
    """Write an ESRI ASCII grid; ``meta`` goes to a .meta.json sidecar."""
    with open(path, "w", encoding="utf-8") as fh:
        write_ascii_header(fh, layer.grid, layer.nodata, layer.kind)
        write_ascii_rows(fh, layer.values, layer.kind)
    if meta is not None:
        write_meta_sidecar(path, meta)


def write_meta_sidecar(path, meta):
    sidecar = os.path.splitext(path)[0] + ".meta.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_ascii(path, kind=KIND_REAL):
    """Read an ESRI ASCII grid written by :func:`write_ascii` or a GIS."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        pos = fh.tell()
        for _ in range(6):
            line = fh.readline()
            parts = line.split()
            if len(parts) != 2 or not parts[0][:1].isalpha():
                break
            header[parts[0].lower()] = parts[1]
            pos = fh.tell()
        fh.seek(pos)
        try:
            ncols = int(header["ncols"])
            nrows = int(header["nrows"])
            xll = float(header["xllcorner"])
            yll = float(header["yllcorner"])
            step = float(header["cellsize"])
            nodata = float(header.get("nodata_value", REAL_NODATA))
        except KeyError as exc:
            raise DataError(f"missing {exc.args[0]!r} in ascii grid header of {path}") from None
        dtype = np.int32 if kind == KIND_STATUS else np.float64
        values = np.loadtxt(fh, dtype=dtype, ndmin=2)
    if values.shape != (nrows, ncols):
        raise DataError(f"grid body is {values.shape}, header says ({nrows}, {ncols})")
    lon0 = xll + step / 2.0
    lat0 = yll + step / 2.0
    grid = GridSpec(
        lon0=lon0,
        lon1=lon0 + (ncols - 1) * step,
        lat0=lat0,
        lat1=lat0 + (nrows - 1) * step,
        step=step,
    )
    return RasterLayer(grid=grid, values=values, nodata=nodata if kind == KIND_REAL else int(nodata), kind=kind)


@dataclass(frozen=True)
class RegionRaster:
    """Per-cell region ids with a name catalog for reports."""

    grid: GridSpec
    ids: np.ndarray  # (rows, cols) int32, nodata < 0
    names: dict  # id -> display name
    nodata: int = STATUS_NODATA

    def __post_init__(self):
        if self.ids.shape != (self.grid.nrows, self.grid.ncols):
            raise ValueError("region ids shape does not match grid")

    def name_of(self, region_id):
        return self.names.get(region_id, str(region_id))

    def present_ids(self):
        vals = np.unique(self.ids)
        return [int(v) for v in vals if v != self.nodata]

    @classmethod
    def from_layer(cls, layer, names=None):
        return cls(
            grid=layer.grid,
            ids=layer.values.astype(np.int32),
            names=dict(names or {}),
            nodata=int(layer.nodata),
        )


def load_region_catalog(path):
    """Region catalog CSV ``region_id,name`` -> dict."""
    names = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.lower().replace(" ", "") == "region_id,name":
                continue
            parts = line.split(",", 1)
            if len(parts) != 2:
                raise DataError(f"expected 'region_id,name', got {line!r}", line=lineno)
            try:
                names[int(parts[0])] = parts[1].strip()
            except ValueError:
                raise DataError(f"non-integer region id {parts[0]!r}", line=lineno) from None
    return names


@dataclass(frozen=True)
class FeatureStack:
    """Covariate bands plus land mask and continent ids on one grid.

    Band order is the model feature order; lon and lat are appended as
    two extra covariates by the feature extraction helpers, so a model
    trained against this stack expects D = n_bands + 2 inputs.
    """

    grid: GridSpec
    band_names: tuple
    bands: tuple  # of (rows, cols) float64 arrays
    band_kinds: tuple  # "continuous" | "categorical"
    land: np.ndarray  # (rows, cols) bool
    continent_ids: np.ndarray  # (rows, cols) int32, -1 over water
    continent_names: tuple

    @property
    def n_bands(self):
        return len(self.bands)

    @property
    def n_features(self):
        return self.n_bands + 2

    def feature_names(self):
        return tuple(self.band_names) + ("lon", "lat")

    def continent_name_at(self, row, col):
        cid = int(self.continent_ids[row, col])
        return self.continent_names[cid] if 0 <= cid < len(self.continent_names) else None

    def band_window_mean(self, band_index, row, col, radius):
        """Mean of the square window clipped to the grid (NaN propagates)."""
        band = self.bands[band_index]
        r0, r1 = max(0, row - radius), min(band.shape[0], row + radius + 1)
        c0, c1 = max(0, col - radius), min(band.shape[1], col + radius + 1)
        return float(band[r0:r1, c0:c1].mean())

    def features_at_cells(self, rows, cols, patch_radius=0):
        """(B, n_features) matrix for grid cells, bands then lon, lat."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        out = np.empty((rows.size, self.n_features), dtype=np.float64)
        if patch_radius == 0:
            for b, band in enumerate(self.bands):
                out[:, b] = band[rows, cols]
        else:
            for b in range(self.n_bands):
                for i in range(rows.size):
                    out[i, b] = self.band_window_mean(b, int(rows[i]), int(cols[i]), patch_radius)
        out[:, self.n_bands] = self.grid.lon0 + cols * self.grid.step
        out[:, self.n_bands + 1] = self.grid.lat1 - rows * self.grid.step
        return out

    def features_at_points(self, lons, lats, patch_radius=0):
        """Features at arbitrary lon/lat points via nearest-cell lookup.

        The appended coordinate covariates keep the exact point values,
        not the snapped cell centers.
        """
        lons = np.asarray(lons, dtype=np.float64)
        lats = np.asarray(lats, dtype=np.float64)
        cols = np.clip(
            np.round((lons - self.grid.lon0) / self.grid.step).astype(np.int64),
            0, self.grid.ncols - 1,
        )
        rows = np.clip(
            np.round((self.grid.lat1 - lats) / self.grid.step).astype(np.int64),
            0, self.grid.nrows - 1,
        )
        out = self.features_at_cells(rows, cols, patch_radius=patch_radius)
        out[:, self.n_bands] = lons
        out[:, self.n_bands + 1] = lats
        return out


def band_entry(name, kind, path):
    return {"name": name, "kind": kind, "file": path}


def save_feature_stack(stack, directory, meta=None):
    """Write bands, masks and the manifest JSON under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    bands = []
    for name, kind, band in zip(stack.band_names, stack.band_kinds, stack.bands):
        fname = f"band_{name}.asc"
        write_ascii(
            RasterLayer(grid=stack.grid, values=band, nodata=REAL_NODATA, kind=KIND_REAL),
            os.path.join(directory, fname),
        )
        bands.append(band_entry(name, kind, fname))
    write_ascii(
        RasterLayer(grid=stack.grid, values=stack.land.astype(np.int32), nodata=STATUS_NODATA,
                    kind=KIND_STATUS),
        os.path.join(directory, "land_mask.asc"),
    )
    write_ascii(
        RasterLayer(grid=stack.grid, values=stack.continent_ids, nodata=STATUS_NODATA,
                    kind=KIND_STATUS),
        os.path.join(directory, "continents.asc"),
    )
    manifest = {
        "bands": bands,
        "land_mask": "land_mask.asc",
        "continent_band": "continents.asc",
        "continent_names": list(stack.continent_names),
    }
    if meta is not None:
        manifest["meta"] = meta
    with open(os.path.join(directory, "stack.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return os.path.join(directory, "stack.json")


def load_feature_stack(manifest_path):
    """Load a stack from its manifest; all bands must share one grid."""
    directory = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    names, kinds, bands = [], [], []
    grid = None

    def _resolve(fname):
        return fname if os.path.isabs(fname) else os.path.join(directory, fname)

    for entry in manifest["bands"]:
        layer = read_ascii(_resolve(entry["file"]), kind=KIND_REAL)
        if grid is None:
            grid = layer.grid
        elif layer.grid != grid:
            raise GridMismatchError(f"band {entry['name']!r} grid differs from the stack grid")
        names.append(entry["name"])
        kinds.append(entry.get("kind", "continuous"))
        bands.append(layer.values)
    land_layer = read_ascii(_resolve(manifest["land_mask"]), kind=KIND_STATUS)
    cont_layer = read_ascii(_resolve(manifest["continent_band"]), kind=KIND_STATUS)
    if grid is None:
        grid = land_layer.grid
    if land_layer.grid != grid or cont_layer.grid != grid:
        raise GridMismatchError("land mask or continent band grid differs from the stack grid")
    return FeatureStack(
        grid=grid,
        band_names=tuple(names),
        bands=tuple(bands),
        band_kinds=tuple(kinds),
        land=land_layer.values != 0,
        continent_ids=cont_layer.values.astype(np.int32),
        continent_names=tuple(manifest.get("continent_names", ())),
    )
