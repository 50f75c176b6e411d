"""Central vocabulary: species, IUCN statuses, occurrences and assemblages.

Probability vectors are plain 1-D float64 NumPy arrays of length C (the
number of catalogued species); helpers here only validate them. All types
are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

logger = logging.getLogger(__name__)

PROB_SUM_TOL = 1e-9


class DataError(ValueError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingStatusError(LookupError):
    """A species has no status under any accepted source."""


class StatusCategory(IntEnum):
    """IUCN Red List category, ordered LC < NT < VU < EN < CR."""

    LC = 0
    NT = 1
    VU = 2
    EN = 3
    CR = 4

    @property
    def is_threat(self):
        """True for the VU/EN/CR union (the derived THREAT group)."""
        return self >= StatusCategory.VU


#: THREAT is a derived set, never a storable sixth category.
THREAT_CATEGORIES = (StatusCategory.VU, StatusCategory.EN, StatusCategory.CR)

STATUS_NAMES = tuple(c.name for c in StatusCategory)

SOURCE_ASSESSED = "assessed"
SOURCE_PREDICTED = "predicted"

# integer encoding of the status source, used in resolved arrays
SOURCE_CODE_NONE = 0
SOURCE_CODE_PREDICTED = 1
SOURCE_CODE_ASSESSED = 2


def parse_status(text, line=None):
    """Parse a status string, raising :class:`DataError` for unknown values."""
    try:
        return StatusCategory[text.strip()]
    except KeyError:
        raise DataError(f"unknown status {text!r}; expected one of {STATUS_NAMES}", line=line) from None


@dataclass(frozen=True)
class SpeciesCatalog:
    """Dense id assignment for species names.

    Ids are contiguous ``0..C-1`` in first-appearance order of the source
    data; names are unique.
    """

    names: tuple
    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})
        if len(self._index) != len(self.names):
            raise DataError("species names are not unique")

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._index

    def id_of(self, name):
        return self._index[name]

    def name_of(self, species_id):
        return self.names[species_id]


@dataclass(frozen=True)
class OccurrenceDataset:
    """Columnar presence-only occurrence records.

    ``species`` holds dense catalog ids; ``region`` and ``continent`` are
    the raw string identifiers from the source file.
    """

    catalog: SpeciesCatalog
    species: np.ndarray  # (n,) int32
    lon: np.ndarray  # (n,) float64
    lat: np.ndarray  # (n,) float64
    region: np.ndarray  # (n,) object
    continent: np.ndarray  # (n,) object

    @property
    def n(self):
        return len(self.species)

    @property
    def n_species(self):
        return len(self.catalog)

    def subset(self, mask):
        """Row subset sharing the full catalog (ids keep their meaning)."""
        return OccurrenceDataset(
            catalog=self.catalog,
            species=self.species[mask],
            lon=self.lon[mask],
            lat=self.lat[mask],
            region=self.region[mask],
            continent=self.continent[mask],
        )


OCCURRENCE_HEADER = ["species", "lon", "lat", "region", "continent"]
STATUS_HEADER = ["species", "status", "source"]


def load_occurrences(path):
    """Load an occurrence CSV (``species,lon,lat,region,continent``).

    Species ids are assigned densely in first-appearance order. Malformed
    rows and out-of-range coordinates raise :class:`DataError` with the
    line number.
    """
    names = []
    index = {}
    species, lon, lat, region, continent = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != OCCURRENCE_HEADER:
            raise DataError(f"expected header {','.join(OCCURRENCE_HEADER)!r}, got {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"expected 5 fields, got {len(row)}", line=lineno)
            name, lon_s, lat_s, reg, cont = (f.strip() for f in row)
            try:
                x = float(lon_s)
                y = float(lat_s)
            except ValueError:
                raise DataError(f"non-numeric coordinate in {row!r}", line=lineno) from None
            if not -180.0 <= x <= 180.0:
                raise DataError(f"lon={x} outside [-180, 180]", line=lineno)
            if not -90.0 <= y <= 90.0:
                raise DataError(f"lat={y} outside [-90, 90]", line=lineno)
            if name not in index:
                index[name] = len(names)
                names.append(name)
            species.append(index[name])
            lon.append(x)
            lat.append(y)
            region.append(reg)
            continent.append(cont)
    return OccurrenceDataset(
        catalog=SpeciesCatalog(tuple(names)),
        species=np.asarray(species, dtype=np.int32),
        lon=np.asarray(lon, dtype=np.float64),
        lat=np.asarray(lat, dtype=np.float64),
        region=np.asarray(region, dtype=object),
        continent=np.asarray(continent, dtype=object),
    )


def save_occurrences(data, path):
    """Write a dataset back to the occurrence CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(OCCURRENCE_HEADER)
        for i in range(data.n):
            writer.writerow(
                [
                    data.catalog.name_of(data.species[i]),
                    repr(float(data.lon[i])),
                    repr(float(data.lat[i])),
                    data.region[i],
                    data.continent[i],
                ]
            )


@dataclass(frozen=True)
class StatusTable:
    """Species-name keyed status maps, one per source.

    Lookup precedence between an official assessment and an automatic
    prediction is a caller decision (``prefer``); the default prefers the
    assessment. A species absent from both sources raises
    :class:`MissingStatusError` so callers can choose an exclusion policy
    instead of silently defaulting.
    """

    assessed: dict
    predicted: dict

    def __len__(self):
        return len(self.assessed.keys() | self.predicted.keys())

    def status_of(self, name, prefer=SOURCE_ASSESSED):
        primary, secondary = (self.assessed, self.predicted)
        if prefer == SOURCE_PREDICTED:
            primary, secondary = secondary, primary
        if name in primary:
            return primary[name]
        if name in secondary:
            return secondary[name]
        raise MissingStatusError(name)

    def source_of(self, name, prefer=SOURCE_ASSESSED):
        primary = SOURCE_ASSESSED if prefer != SOURCE_PREDICTED else SOURCE_PREDICTED
        secondary = SOURCE_PREDICTED if prefer != SOURCE_PREDICTED else SOURCE_ASSESSED
        if name in (self.assessed if primary == SOURCE_ASSESSED else self.predicted):
            return primary
        if name in (self.assessed if secondary == SOURCE_ASSESSED else self.predicted):
            return secondary
        raise MissingStatusError(name)

    def resolve(self, catalog, prefer=SOURCE_ASSESSED):
        """Resolve names to dense-id status code arrays.

        Names absent from the catalog are counted but dropped. Code ``-1``
        marks a species without a status under the given view.
        """
        n = len(catalog)
        merged = np.full(n, -1, dtype=np.int8)
        assessed = np.full(n, -1, dtype=np.int8)
        source = np.full(n, SOURCE_CODE_NONE, dtype=np.int8)
        unmatched = 0
        for name, cat in self.predicted.items():
            if name in catalog:
                merged[catalog.id_of(name)] = int(cat)
                source[catalog.id_of(name)] = SOURCE_CODE_PREDICTED
            else:
                unmatched += 1
        for name, cat in self.assessed.items():
            if name in catalog:
                i = catalog.id_of(name)
                assessed[i] = int(cat)
                if prefer == SOURCE_ASSESSED or source[i] == SOURCE_CODE_NONE:
                    merged[i] = int(cat)
                    source[i] = SOURCE_CODE_ASSESSED
            else:
                unmatched += 1
        if unmatched:
            logger.warning("%d status rows reference species outside the catalog", unmatched)
        return ResolvedStatuses(merged=merged, assessed=assessed, source=source, n_unmatched=unmatched)


@dataclass(frozen=True)
class ResolvedStatuses:
    """Status codes aligned to catalog ids (``-1`` = no status)."""

    merged: np.ndarray  # (C,) int8, precedence-merged over both sources
    assessed: np.ndarray  # (C,) int8, official assessments only
    source: np.ndarray  # (C,) int8, SOURCE_CODE_* of the merged value
    n_unmatched: int


def load_status_table(path):
    """Load a status CSV (``species,status,source``).

    Unknown status strings and duplicate ``(species, source)`` pairs are
    errors; a species may legitimately appear once per source.
    """
    assessed = {}
    predicted = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != STATUS_HEADER:
            raise DataError(f"expected header {','.join(STATUS_HEADER)!r}, got {header!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"expected 3 fields, got {len(row)}", line=lineno)
            name, status_s, source_s = (f.strip() for f in row)
            cat = parse_status(status_s, line=lineno)
            source_s = source_s.lower()
            if source_s == SOURCE_ASSESSED:
                target = assessed
            elif source_s == SOURCE_PREDICTED:
                target = predicted
            else:
                raise DataError(
                    f"unknown source {source_s!r}; expected {SOURCE_ASSESSED!r} or {SOURCE_PREDICTED!r}",
                    line=lineno,
                )
            if name in target:
                raise DataError(f"duplicate ({name!r}, {source_s!r}) entry", line=lineno)
            target[name] = cat
    return StatusTable(assessed=assessed, predicted=predicted)


def check_probability_vector(values, tol=PROB_SUM_TOL):
    """Validate a normalized probability vector (non-negative, sums to 1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {values.shape}")
    if np.any(values < 0):
        raise ValueError("probability vector has negative entries")
    total = float(values.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"probability vector sums to {total}, not 1")
    return values


@dataclass(frozen=True)
class Assemblage:
    """A thresholded species set, optionally carrying relative weights.

    ``members`` are catalog ids in ascending order. ``weights`` (aligned to
    members) are raw conditional probabilities until renormalized; zero
    weights never survive construction.
    """

    members: np.ndarray  # (m,) int32, ascending
    weights: np.ndarray | None = None  # (m,) float64 or None

    @classmethod
    def from_arrays(cls, members, weights=None):
        members = np.asarray(members, dtype=np.int32)
        order = np.argsort(members, kind="stable")
        members = members[order]
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)[order]
            keep = weights > 0.0
            members = members[keep]
            weights = weights[keep]
        return cls(members=members, weights=weights)

    @classmethod
    def empty(cls):
        return cls(members=np.empty(0, dtype=np.int32), weights=np.empty(0, dtype=np.float64))

    @property
    def size(self):
        return len(self.members)

    @property
    def is_empty(self):
        return len(self.members) == 0

    def weight_of(self, species_id):
        idx = np.searchsorted(self.members, species_id)
        if idx == len(self.members) or self.members[idx] != species_id:
            raise KeyError(species_id)
        return float(self.weights[idx])
