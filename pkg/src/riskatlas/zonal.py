"""Zonal aggregation of indicator rasters over region rasters.

Area shares of the worst-status classes, per-region means of real
indicators, top-k rankings, and rank correlation between two regional
statistics.
"""
from __future__ import annotations

import itertools
import logging
import math

import numpy as np
from scipy import stats as _scipy_stats

from .domain import StatusCategory
from .grids import GridMismatchError

logger = logging.getLogger(__name__)

#: mean equatorial km per degree used to translate the km2 area floor
KM_PER_DEGREE = 111.32

_PERM_CHUNK = 40320  # 8! permutations per vectorized block


class ConstantInputError(ValueError):
    """Correlation is undefined for a constant vector."""


def min_region_cells(min_km2, step_degrees):
    """Cell-count floor equivalent to an area floor in km2.

    Uses the equatorial cell area (step * 111.32 km)^2; coarse, but the
    floor only gates which regions are reported.
    """
    cell_area = (step_degrees * KM_PER_DEGREE) ** 2
    return max(1, math.ceil(min_km2 / cell_area))


def _check_grids(layer, regions):
    if layer.grid != regions.grid:
        raise GridMismatchError("indicator raster and region raster are on different grids")


def region_cell_counts(regions):
    """Total raster cells per region id (any indicator state)."""
    ids = regions.ids[regions.ids != regions.nodata]
    counts = {}
    for rid in np.unique(ids):
        counts[int(rid)] = int((ids == rid).sum())
    return counts


def zonal_area_pct(io_layer, regions, category, min_cells=1):
    """Share (in %) of a region's classified cells in ``category``.

    The denominator is the count of the region's cells with any
    non-nodata worst-status value, so the five shares partition 100.
    Regions below ``min_cells`` total cells are excluded; regions with
    zero classified cells are omitted with a warning.
    """
    _check_grids(io_layer, regions)
    category = int(category)
    table = zonal_area_table(io_layer, regions, min_cells=min_cells)
    return {region: shares[category] for region, shares in table.items()}


def zonal_area_table(io_layer, regions, min_cells=1):
    """All five per-category shares at once: region -> {code: pct}."""
    _check_grids(io_layer, regions)
    out = {}
    values = io_layer.values
    for rid, total in sorted(region_cell_counts(regions).items()):
        if total < min_cells:
            continue
        in_region = regions.ids == rid
        vals = values[in_region]
        vals = vals[vals != int(io_layer.nodata)]
        name = regions.name_of(rid)
        if vals.size == 0:
            logger.warning("region %s has no classified cells; omitted", name)
            continue
        out[name] = {
            int(c): 100.0 * float((vals == int(c)).sum()) / vals.size for c in StatusCategory
        }
    return out


def zonal_mean(layer, regions, min_cells=1):
    """Arithmetic mean of non-nodata cells per region.

    All-nodata regions and regions below the cell floor are omitted.
    """
    _check_grids(layer, regions)
    out = {}
    values = layer.values
    for rid, total in sorted(region_cell_counts(regions).items()):
        if total < min_cells:
            continue
        in_region = regions.ids == rid
        vals = values[in_region]
        vals = vals[vals != layer.nodata]
        if vals.size == 0:
            logger.warning("region %s is all nodata; omitted", regions.name_of(rid))
            continue
        out[regions.name_of(rid)] = float(vals.mean())
    return out


def rank_regions(stat, k, direction="desc"):
    """Top-k regions by value; ties break on the region name.

    Returns ``[(region, value), ...]`` with full-precision values; any
    display rounding is the formatter's business.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if direction not in ("desc", "asc"):
        raise ValueError(f"direction must be 'desc' or 'asc', got {direction!r}")
    sign = -1.0 if direction == "desc" else 1.0
    ordered = sorted(stat.items(), key=lambda kv: (sign * kv[1], kv[0]))
    return ordered[:k]


def _rank(values):
    return _scipy_stats.rankdata(values, method="average")


def _exact_permutation_p(rank_x, rank_y, rho_obs):
    """Two-sided p over all pairings of the observed ranks."""
    n = rank_x.size
    a = rank_x - rank_x.mean()
    b = rank_y - rank_y.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    hits = 0
    total = 0
    target = abs(rho_obs) - 1e-12
    perm_iter = itertools.permutations(range(n))
    while True:
        block = np.array(list(itertools.islice(perm_iter, _PERM_CHUNK)), dtype=np.int64)
        if block.size == 0:
            break
        rhos = (b[block] * a).sum(axis=1) / denom
        hits += int((np.abs(rhos) >= target).sum())
        total += block.shape[0]
    return hits / total


def spearman(x, y):
    """Spearman rank correlation with a two-sided p-value.

    Ties get average ranks. The p-value is exact (all-permutations)
    for n <= 10 and the t-approximation with n-2 degrees of freedom
    beyond that. Constant inputs raise :class:`ConstantInputError`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D vectors")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ConstantInputError("correlation undefined for a constant vector")
    rank_x, rank_y = _rank(x), _rank(y)
    rho = float(np.corrcoef(rank_x, rank_y)[0, 1])
    if n <= 10:
        p = _exact_permutation_p(rank_x, rank_y, rho)
    else:
        if abs(rho) >= 1.0:
            p = 0.0
        else:
            t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p = 2.0 * float(_scipy_stats.t.sf(abs(t), df=n - 2))
    return rho, p
