"""Batched map inference: from covariate stack to indicator rasters.

The output grid is partitioned into fixed row strips (a pure function
of grid width and buffer size, never of worker count). Workers process
strips independently against read-only inputs; the main thread consumes
results in strip order and hands rows to sinks as soon as they are
ready, so peak memory stays bounded by the in-flight strips and rasters
are byte-identical for any batch size or worker count.
"""
from __future__ import annotations

import collections
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import BACKEND, cell_indicators
from .grids import (
    KIND_REAL,
    KIND_STATUS,
    REAL_NODATA,
    STATUS_NODATA,
    GridMismatchError,
    RasterLayer,
    write_ascii_header,
    write_ascii_rows,
    write_meta_sidecar,
)

logger = logging.getLogger(__name__)

#: canonical indicator names in output order
STATUS_INDICATORS = ("I_LC", "I_NT", "I_VU", "I_EN", "I_CR")
BASE_INDICATORS = ("I_O",) + STATUS_INDICATORS + ("I_THREAT", "I_H")
ALL_INDICATORS = BASE_INDICATORS + tuple(f"{n}_IUCN" for n in BASE_INDICATORS)

_PCT_BINS = 1001  # 0.1% resolution for the removal-percentage median


def indicator_kind(name):
    return KIND_STATUS if name in ("I_O", "I_O_IUCN") else KIND_REAL


def indicator_nodata(name):
    return STATUS_NODATA if indicator_kind(name) == KIND_STATUS else REAL_NODATA


def _kernel_field(name):
    """Map an indicator name to its kernel output key and column."""
    iucn = name.endswith("_IUCN")
    base = name[: -len("_IUCN")] if iucn else name
    suffix = "_iucn" if iucn else ""
    if base == "I_O":
        return "io" + suffix, None
    if base == "I_THREAT":
        return "threat" + suffix, None
    if base == "I_H":
        return "h" + suffix, None
    return "ic" + suffix, STATUS_INDICATORS.index(base)


def validate_indicator_names(names):
    bad = [n for n in names if n not in ALL_INDICATORS]
    if bad:
        raise ValueError(f"unknown indicators {bad}; valid names: {', '.join(ALL_INDICATORS)}")
    return tuple(names)


def build_grid(spec, land_mask):
    """Land grid points of ``spec``, in row-major north-to-south order.

    Returns ``(lons, lats)`` arrays. A mask that does not cover the
    requested box, or covers it with water only, yields empty arrays
    with a warning rather than an error.
    """
    try:
        row_off, col_off = spec.offsets_in(land_mask.grid)
    except GridMismatchError as exc:
        warnings.warn(f"land mask does not cover the requested grid ({exc})", stacklevel=2)
        return np.empty(0), np.empty(0)
    window = land_mask.values[row_off : row_off + spec.nrows, col_off : col_off + spec.ncols]
    rows, cols = np.nonzero(window != 0)
    if rows.size == 0:
        warnings.warn("no land cells inside the requested grid", stacklevel=2)
    logger.info("grid %dx%d: %d land points", spec.nrows, spec.ncols, rows.size)
    return spec.lon0 + cols * spec.step, spec.lat1 - rows * spec.step


@dataclass
class MapDiagnostics:
    """Counters accumulated during one map run."""

    n_cells: int = 0
    n_land: int = 0
    n_water: int = 0
    n_predicted: int = 0
    n_nan_features: int = 0
    n_no_continent: int = 0
    n_empty: int = 0
    n_status_free: int = 0
    n_status_free_iucn: int = 0
    n_missing_members: int = 0
    filter_delta_hist: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    filter_pct_hist: np.ndarray = field(default_factory=lambda: np.zeros(_PCT_BINS, dtype=np.int64))

    def merge(self, other):
        self.n_predicted += other.n_predicted
        self.n_nan_features += other.n_nan_features
        self.n_no_continent += other.n_no_continent
        self.n_empty += other.n_empty
        self.n_status_free += other.n_status_free
        self.n_status_free_iucn += other.n_status_free_iucn
        self.n_missing_members += other.n_missing_members
        if other.filter_delta_hist.size > self.filter_delta_hist.size:
            grown = np.zeros(other.filter_delta_hist.size, dtype=np.int64)
            grown[: self.filter_delta_hist.size] = self.filter_delta_hist
            self.filter_delta_hist = grown
        self.filter_delta_hist[: other.filter_delta_hist.size] += other.filter_delta_hist
        self.filter_pct_hist += other.filter_pct_hist

    @property
    def n_filtered_cells(self):
        """Cells where the range filter removed at least one species."""
        return int(self.filter_delta_hist[1:].sum())

    @staticmethod
    def _hist_median(hist):
        total = hist.sum()
        if total == 0:
            return float("nan")
        cum = np.cumsum(hist)
        return float(np.searchsorted(cum, (total + 1) // 2))

    @property
    def median_removed(self):
        """Median per-cell count of species removed by the range filter."""
        return self._hist_median(self.filter_delta_hist)

    @property
    def median_removed_pct(self):
        """Median removal percentage (0.1% resolution)."""
        m = self._hist_median(self.filter_pct_hist)
        return m / (_PCT_BINS - 1) * 100.0 if np.isfinite(m) else m

    def report_lines(self):
        return [
            f"kernel backend: {BACKEND}",
            f"grid cells: {self.n_cells}",
            f"land cells: {self.n_land}",
            f"water cells: {self.n_water}",
            f"predicted cells: {self.n_predicted}",
            f"cells with non-finite features: {self.n_nan_features}",
            f"cells without continent id: {self.n_no_continent}",
            f"empty assemblages: {self.n_empty}",
            f"assemblages with no status-bearing member: {self.n_status_free}",
            f"assemblages with no assessed member: {self.n_status_free_iucn}",
            f"member-status gaps (species instances skipped): {self.n_missing_members}",
        ]

    def filter_report_rows(self):
        """Rows for the range-filter impact CSV (statistic, value)."""
        return [
            ("cells_with_members_before_filter", int(self.filter_delta_hist.sum())),
            ("cells_with_removals", self.n_filtered_cells),
            ("median_species_removed", self.median_removed),
            ("median_removed_pct", round(self.median_removed_pct, 1)
             if np.isfinite(self.median_removed_pct) else float("nan")),
            ("empty_after_filter", self.n_empty),
        ]


class ArraySink:
    """Accumulates rows into a full in-memory raster."""

    def __init__(self, grid, nodata, kind):
        self.grid = grid
        self.nodata = nodata
        self.kind = kind
        dtype = np.int8 if kind == KIND_STATUS else np.float64
        self._values = np.full((grid.nrows, grid.ncols), nodata, dtype=dtype)
        self._row = 0

    def write_rows(self, rows):
        self._values[self._row : self._row + rows.shape[0]] = rows
        self._row += rows.shape[0]

    def close(self):
        if self._row != self.grid.nrows:
            raise RuntimeError(f"sink received {self._row} of {self.grid.nrows} rows")

    def to_layer(self):
        return RasterLayer(grid=self.grid, values=self._values, nodata=self.nodata, kind=self.kind)


class AsciiSink:
    """Streams rows straight into an ESRI ASCII file."""

    def __init__(self, path, grid, nodata, kind, meta=None):
        self.path = path
        self.grid = grid
        self.nodata = nodata
        self.kind = kind
        self._fh = open(path, "w", encoding="utf-8")
        write_ascii_header(self._fh, grid, nodata, kind)
        self._rows = 0
        if meta is not None:
            write_meta_sidecar(path, meta)

    def write_rows(self, rows):
        write_ascii_rows(self._fh, rows, self.kind)
        self._rows += rows.shape[0]

    def close(self):
        self._fh.close()
        if self._rows != self.grid.nrows:
            raise RuntimeError(f"{self.path}: wrote {self._rows} of {self.grid.nrows} rows")


def rows_per_strip(out_grid, buffer_size):
    """Strip height in rows; a pure function of grid width and buffer."""
    return max(1, int(buffer_size) // out_grid.ncols)


@dataclass(frozen=True)
class MapResult:
    """Outcome of :func:`batch_predict_map`.

    ``layers`` maps indicator name to RasterLayer when the run used
    in-memory sinks; None when rows were streamed to caller sinks.
    """

    layers: dict | None
    diagnostics: MapDiagnostics


def _strip_worker(
    row_range, model, stack, lam, allowed_matrix, merged, assessed,
    names, row_off, col_off, ncols_out, batch_size, patch_radius,
):
    """Compute one strip of output rows; pure function of its inputs."""
    r0, r1 = row_range
    n_classes = merged.shape[0]
    arrays = {}
    for name in names:
        kind = indicator_kind(name)
        dtype = np.int8 if kind == KIND_STATUS else np.float64
        arrays[name] = np.full((r1 - r0, ncols_out), indicator_nodata(name), dtype=dtype)
    diag = MapDiagnostics(filter_delta_hist=np.zeros(n_classes + 1, dtype=np.int64))

    land = stack.land[row_off + r0 : row_off + r1, col_off : col_off + ncols_out]
    rows_local, cols_local = np.nonzero(land)
    n_cont = allowed_matrix.shape[0]
    for start in range(0, rows_local.size, batch_size):
        sl = slice(start, start + batch_size)
        rl, cl = rows_local[sl], cols_local[sl]
        srows, scols = row_off + r0 + rl, col_off + cl
        feats = stack.features_at_cells(srows, scols, patch_radius=patch_radius)
        cont = stack.continent_ids[srows, scols]
        finite = np.isfinite(feats).all(axis=1)
        has_cont = (cont >= 0) & (cont < n_cont)
        valid = finite & has_cont
        diag.n_nan_features += int((~finite).sum())
        diag.n_no_continent += int((finite & ~has_cont).sum())
        if not valid.any():
            continue
        probs = model.predict_proba_batch(feats[valid])
        res = cell_indicators(probs, lam, allowed_matrix[cont[valid]], merged, assessed)
        vr, vc = rl[valid], cl[valid]
        for name in names:
            key, col = _kernel_field(name)
            vals = res[key] if col is None else res[key][:, col]
            if indicator_kind(name) == KIND_REAL:
                vals = np.where(np.isfinite(vals), vals, REAL_NODATA)
            arrays[name][vr, vc] = vals

        size_raw, size = res["size_raw"], res["size"]
        diag.n_predicted += int(valid.sum())
        diag.n_empty += int((size == 0).sum())
        diag.n_status_free += int(((size > 0) & (res["io"] == -1)).sum())
        diag.n_status_free_iucn += int(((size > 0) & (res["io_iucn"] == -1)).sum())
        diag.n_missing_members += int(res["n_missing"].sum())
        had = size_raw > 0
        if had.any():
            delta = (size_raw[had] - size[had]).astype(np.int64)
            diag.filter_delta_hist += np.bincount(delta, minlength=n_classes + 1)
            frac = delta / size_raw[had]
            bins = np.rint(frac * (_PCT_BINS - 1)).astype(np.int64)
            diag.filter_pct_hist += np.bincount(bins, minlength=_PCT_BINS)
    return arrays, diag


def batch_predict_map(
    model,
    stack,
    lam,
    prior,
    statuses,
    indicator_names,
    *,
    out_grid=None,
    batch_size=512,
    buffer_size=50000,
    workers=1,
    patch_radius=0,
    sinks=None,
):
    """Predict every land cell and rasterize the requested indicators.

    Per land cell: probabilities -> threshold at ``lam`` -> geographic
    filter -> renormalize -> indicators. Water cells, cells with
    non-finite features or no continent id, and post-filter empty
    assemblages come out as nodata (tallied separately). Output bits do
    not depend on ``batch_size`` or ``workers``.

    Parameters
    ----------
    model : SoftmaxModel (or anything with predict_proba_batch)
    stack : FeatureStack
    lam : float
        Calibrated threshold.
    prior : ContinentPrior
    statuses : ResolvedStatuses
    indicator_names : sequence of names from :data:`ALL_INDICATORS`
    out_grid : GridSpec, optional
        Sub-grid to rasterize (default: the stack grid). Must lie on
        the stack lattice.
    sinks : dict name -> sink, optional
        Streaming targets; default builds in-memory rasters.

    Returns
    -------
    MapResult
    """
    names = validate_indicator_names(indicator_names)
    if model.n_features != stack.n_features:
        raise GridMismatchError(
            f"model expects {model.n_features} features, stack provides {stack.n_features}"
        )
    if model.n_classes != len(prior):
        raise GridMismatchError(
            f"model has {model.n_classes} species, prior covers {len(prior)}"
        )
    out_grid = out_grid if out_grid is not None else stack.grid
    row_off, col_off = out_grid.offsets_in(stack.grid)
    merged, assessed = statuses.merged, statuses.assessed
    if merged.shape[0] != model.n_classes:
        raise GridMismatchError(
            f"status table resolves {merged.shape[0]} species, model has {model.n_classes}"
        )
    allowed_matrix = prior.allowed_matrix(stack.continent_names)

    own_sinks = sinks is None
    if own_sinks:
        sinks = {
            name: ArraySink(out_grid, indicator_nodata(name), indicator_kind(name))
            for name in names
        }

    land_window = stack.land[
        row_off : row_off + out_grid.nrows, col_off : col_off + out_grid.ncols
    ]
    diag = MapDiagnostics(
        n_cells=out_grid.n_points,
        n_land=int(land_window.sum()),
        filter_delta_hist=np.zeros(model.n_classes + 1, dtype=np.int64),
    )
    diag.n_water = diag.n_cells - diag.n_land

    height = rows_per_strip(out_grid, buffer_size)
    strips = [(r, min(r + height, out_grid.nrows)) for r in range(0, out_grid.nrows, height)]

    def run(strip):
        return _strip_worker(
            strip, model, stack, lam, allowed_matrix, merged, assessed,
            names, row_off, col_off, out_grid.ncols, batch_size, patch_radius,
        )

    def consume(result):
        arrays, sdiag = result
        for name in names:
            sinks[name].write_rows(arrays[name])
        diag.merge(sdiag)

    if workers <= 1:
        for strip in strips:
            consume(run(strip))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = collections.deque()
            strip_iter = iter(strips)
            exhausted = False
            while pending or not exhausted:
                while not exhausted and len(pending) < 2 * workers:
                    try:
                        pending.append(pool.submit(run, next(strip_iter)))
                    except StopIteration:
                        exhausted = True
                if pending:
                    consume(pending.popleft().result())

    for sink in sinks.values():
        sink.close()
    layers = {name: sinks[name].to_layer() for name in names} if own_sinks else None
    logger.info(
        "mapped %d/%d land cells (%d empty, %d feature gaps)",
        diag.n_predicted, diag.n_land, diag.n_empty, diag.n_nan_features,
    )
    return MapResult(layers=layers, diagnostics=diag)


def predict_point(model, stack, lam, prior, statuses, lon, lat, patch_radius=0):
    """Single-point pipeline used by the explanation dump.

    Returns the renormalized assemblage at the nearest grid cell, or
    None when the cell is water/invalid.
    """
    from .conformal import predict_set
    from .geoprior import filter_by_prior, renormalize

    row, col = stack.grid.nearest_cell(lon, lat)
    if not stack.land[row, col]:
        return None
    continent = stack.continent_name_at(row, col)
    if continent is None:
        return None
    feats = stack.features_at_cells(
        np.array([row]), np.array([col]), patch_radius=patch_radius
    )
    if not np.isfinite(feats).all():
        return None
    probs = model.predict_proba_batch(feats)[0]
    raw = predict_set(probs, lam)
    return renormalize(filter_by_prior(raw, continent, prior))
