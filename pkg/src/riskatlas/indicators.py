"""Assemblage-level conservation indicators.

Three families: the most critical status present (worst case), the
weighted proportion per status (composition), and Shannon entropy of
the weights (diversity). Status-less members are skipped by the worst
case and excluded from the proportion denominator; the exclusion counts
are surfaced so the bias stays visible. Variants restricted to
officially assessed species are the same operations run against the
assessed-only status view after re-renormalization.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .domain import Assemblage, StatusCategory

#: sentinel category for the VU+EN+CR union; not a storable status
THREAT = "THREAT"

NO_STATUS = -1


def restrict_to_status_bearing(assemblage, status_codes):
    """Drop members without a status and renormalize the survivors.

    Returns the empty assemblage when nothing survives. ``status_codes``
    is the (C,) int8 array with -1 for species lacking a status.
    """
    if assemblage.is_empty:
        return Assemblage.empty()
    keep = status_codes[assemblage.members] != NO_STATUS
    members = assemblage.members[keep]
    if members.size == 0:
        return Assemblage.empty()
    weights = None
    if assemblage.weights is not None:
        weights = assemblage.weights[keep]
        total = weights.sum()
        if total <= 0.0:
            return Assemblage.empty()
        weights = weights / total
    return Assemblage(members=members, weights=weights)


def indicator_IO(assemblage, status_codes):
    """Most critical status among members; None when undefined.

    Returns ``(category, n_skipped)``: the max status under the order
    LC < NT < VU < EN < CR, and how many members were skipped for lack
    of a status. The category is None for an empty assemblage or when
    every member was skipped.
    """
    if assemblage.is_empty:
        return None, 0
    codes = status_codes[assemblage.members]
    known = codes[codes != NO_STATUS]
    n_skipped = int(assemblage.size - known.size)
    if known.size == 0:
        return None, n_skipped
    return StatusCategory(int(known.max())), n_skipped


def indicator_Ic(assemblage, status_codes, category):
    """Weight share of members carrying ``category``.

    Expects weights already renormalized over status-bearing members
    (see :func:`restrict_to_status_bearing`). ``category`` may also be
    the :data:`THREAT` sentinel, computed as the exact float sum of the
    VU, EN and CR shares.
    """
    if assemblage.is_empty:
        return None
    if category == THREAT:
        shares = [indicator_Ic(assemblage, status_codes, c) for c in
                  (StatusCategory.VU, StatusCategory.EN, StatusCategory.CR)]
        return (shares[0] + shares[1]) + shares[2]
    codes = status_codes[assemblage.members]
    mask = codes == int(category)
    return float(assemblage.weights[mask].sum())


def shannon(assemblage):
    """Shannon entropy (natural log) of the normalized weights.

    0 for a singleton, None for the empty assemblage. The negative-zero
    neighborhood from rounding is clamped to 0 so the value never dips
    below the theoretical floor.
    """
    if assemblage.is_empty:
        return None
    if assemblage.size == 1:
        return 0.0
    w = assemblage.weights
    return max(0.0, -float((w * np.log(w)).sum()))


@dataclass(frozen=True)
class CellIndicators:
    """All indicator values for one assemblage (None = nodata)."""

    io: StatusCategory | None
    ic: dict
    threat: float | None
    h: float | None
    n_skipped: int


def compute_cell_indicators(assemblage, status_codes):
    """Reference composition of all indicators for one assemblage.

    ``assemblage`` must carry renormalized weights over all members
    (post geographic filter). Diversity uses every member; the status
    family re-renormalizes over status-bearing members first.
    """
    h = shannon(assemblage)
    bearing = restrict_to_status_bearing(assemblage, status_codes)
    io, n_skipped = indicator_IO(assemblage, status_codes)
    if bearing.is_empty:
        return CellIndicators(io=None, ic={c: None for c in StatusCategory}, threat=None, h=h,
                              n_skipped=n_skipped)
    ic = {c: indicator_Ic(bearing, status_codes, c) for c in StatusCategory}
    threat = indicator_Ic(bearing, status_codes, THREAT)
    return CellIndicators(io=io, ic=ic, threat=threat, h=h, n_skipped=n_skipped)


def explain_point(assemblage, statuses, catalog, prefer_assessed=True):
    """Row dump for one location: ``(species, weight, status, source)``.

    ``statuses`` is a resolved status view; rows are ordered by
    descending weight so the most influential species come first.
    """
    rows = []
    order = np.argsort(-assemblage.weights, kind="stable") if not assemblage.is_empty else []
    for pos in order:
        k = int(assemblage.members[pos])
        code = int(statuses.merged[k])
        if code == NO_STATUS:
            status_name, source = "", ""
        else:
            status_name = StatusCategory(code).name
            source = {1: "predicted", 2: "assessed"}.get(int(statuses.source[k]), "")
        rows.append((catalog.name_of(k), float(assemblage.weights[pos]), status_name, source))
    return rows


def write_explain_csv(path, rows, header_comment=None):
    """Write :func:`explain_point` rows as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["species", "weight", "status", "source"])
        for name, weight, status_name, source in rows:
            writer.writerow([name, f"{weight:.9g}", status_name, source])
