"""NumPy fallback for the per-cell indicator kernel.

Mirrors the compiled extension exactly in semantics. Every operation is
either elementwise or a reduction along the class axis, whose summation
tree depends only on C, so results are bit-identical for a given row no
matter how rows are batched (no BLAS call sits on this path).
"""
from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"

N_STATUS = 5


def _status_family(w, codes, member):
    """Shares, worst status and entropy terms for one status view."""
    b = w.shape[0]
    num = np.zeros((b, N_STATUS), dtype=np.float64)
    bearing = member & (codes >= 0)[None, :]
    for c in range(N_STATUS):
        num[:, c] = (w * (codes == c)[None, :]).sum(axis=1)
    denom = (((num[:, 0] + num[:, 1]) + (num[:, 2] + num[:, 3])) + num[:, 4])
    io = np.where(bearing, codes[None, :], -1).max(axis=1, initial=-1).astype(np.int8)
    return num, denom, io, bearing


def _entropy(s1, s2, count):
    """H = ln(s1) - s2/s1 over the counted members; 0 for singletons."""
    h = np.full(s1.shape, np.nan)
    multi = count > 1
    with np.errstate(divide="ignore", invalid="ignore"):
        h[multi] = np.maximum(0.0, np.log(s1[multi]) - s2[multi] / s1[multi])
    h[count == 1] = 0.0
    return h


def cell_indicators(probs, lam, allowed, merged_codes, assessed_codes):
    """Indicator bundle for a batch of cells.

    Parameters
    ----------
    probs : (B, C) float64
        Probability rows (post-softmax, unfiltered).
    lam : float
        Membership threshold (>= rule).
    allowed : (B, C) uint8
        Geographic-prior mask per cell.
    merged_codes, assessed_codes : (C,) int8
        Status ranks 0..4, -1 for none; merged uses both sources,
        assessed the official view only.

    Returns
    -------
    dict of arrays, length B on the leading axis: pre/post-filter set
    sizes, worst status (``io``, -1 nodata), per-status shares
    (``ic``, NaN nodata), ``threat`` (exact VU+EN+CR float sum),
    Shannon ``h`` over all members, the assessed-only quartet
    (``*_iucn``), and the per-cell count of members lacking a status.
    """
    probs = np.asarray(probs, dtype=np.float64)
    included = probs >= lam
    member = included & (allowed != 0)
    size_raw = included.sum(axis=1).astype(np.int32)
    size = member.sum(axis=1).astype(np.int32)
    w = np.where(member, probs, 0.0)
    s1 = w.sum(axis=1)
    logp = np.log(np.where(w > 0.0, probs, 1.0))
    plogp = w * logp
    s2 = plogp.sum(axis=1)

    num, denom, io, bearing = _status_family(w, merged_codes, member)
    numa, denoma, ioa, bearing_a = _status_family(w, assessed_codes, member)
    n_missing = (member & (merged_codes < 0)[None, :]).sum(axis=1).astype(np.int32)

    with np.errstate(divide="ignore", invalid="ignore"):
        ic = num / denom[:, None]
        ica = numa / denoma[:, None]
    no_status = denom <= 0.0
    no_status_a = denoma <= 0.0
    ic[no_status] = np.nan
    ica[no_status_a] = np.nan
    io = np.where(no_status, -1, io).astype(np.int8)
    ioa = np.where(no_status_a, -1, ioa).astype(np.int8)
    threat = np.where(no_status, np.nan, (ic[:, 2] + ic[:, 3]) + ic[:, 4])
    threata = np.where(no_status_a, np.nan, (ica[:, 2] + ica[:, 3]) + ica[:, 4])

    h = _entropy(s1, s2, size)
    count_a = bearing_a.sum(axis=1)
    s1a = (w * bearing_a).sum(axis=1)
    s2a = (plogp * bearing_a).sum(axis=1)
    ha = _entropy(s1a, s2a, count_a)

    empty = size == 0
    for arr in (ic, ica):
        arr[empty] = np.nan
    io[empty] = -1
    ioa[empty] = -1
    threat[empty] = np.nan
    threata[empty] = np.nan
    h[empty] = np.nan
    ha[empty] = np.nan
    return {
        "size_raw": size_raw,
        "size": size,
        "io": io,
        "ic": ic,
        "threat": threat,
        "h": h,
        "io_iucn": ioa,
        "ic_iucn": ica,
        "threat_iucn": threata,
        "h_iucn": ha,
        "n_missing": n_missing,
    }
