"""Continent-level geographic prior: filter predictions to known ranges.

Each species is allowed only on continents where it has at least one
occurrence. Prediction sets lose out-of-range members and the surviving
weights are renormalized back to a probability distribution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .domain import Assemblage, DataError


class PriorCoverageError(KeyError):
    """An assemblage member has no entry in the continent prior."""


@dataclass(frozen=True)
class ContinentPrior:
    """Per-species allowed-continent sets, aligned to catalog ids.

    ``continent_sets[k]`` is the frozen set of continent identifiers
    where species k is known to occur; never empty.
    """

    species_names: tuple
    continent_sets: tuple  # tuple of frozensets, one per species id

    def __len__(self):
        return len(self.continent_sets)

    def continents_of(self, species_id):
        if species_id < 0 or species_id >= len(self.continent_sets):
            raise PriorCoverageError(species_id)
        return self.continent_sets[species_id]

    def allowed_matrix(self, continent_names):
        """(n_continents, C) uint8 lookup: is species k allowed there.

        Row order follows ``continent_names``; names absent from every
        species set produce all-zero rows.
        """
        out = np.zeros((len(continent_names), len(self.continent_sets)), dtype=np.uint8)
        for row, name in enumerate(continent_names):
            for k, cont_set in enumerate(self.continent_sets):
                if name in cont_set:
                    out[row, k] = 1
        return out

    def all_continents(self):
        names = set()
        for s in self.continent_sets:
            names |= s
        return sorted(names)

    def align(self, catalog):
        """Reorder entries to another catalog's id assignment by name."""
        index = {name: i for i, name in enumerate(self.species_names)}
        missing = [n for n in catalog.names if n not in index]
        if missing:
            raise DataError(
                f"prior is missing {len(missing)} catalog species, e.g. {missing[:3]}"
            )
        sets = tuple(self.continent_sets[index[n]] for n in catalog.names)
        return ContinentPrior(species_names=tuple(catalog.names), continent_sets=sets)

    def save(self, path):
        """Audit CSV ``species,continents`` with ;-separated codes."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["species", "continents"])
            for name, cont_set in zip(self.species_names, self.continent_sets):
                writer.writerow([name, ";".join(sorted(cont_set))])

    @classmethod
    def load(cls, path, catalog):
        """Load the audit CSV, aligned against ``catalog`` ids."""
        sets = [None] * len(catalog)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            while header and header[0].startswith("#"):
                header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["species", "continents"]:
                raise DataError(f"expected header 'species,continents', got {header!r}", line=1)
            for lineno, row in enumerate(reader, start=2):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 2:
                    raise DataError(f"expected 2 fields, got {len(row)}", line=lineno)
                name, conts = row[0].strip(), row[1].strip()
                if name not in catalog:
                    continue
                if not conts:
                    raise DataError(f"species {name!r} has an empty continent set", line=lineno)
                sets[catalog.id_of(name)] = frozenset(conts.split(";"))
        missing = [catalog.name_of(i) for i, s in enumerate(sets) if s is None]
        if missing:
            raise DataError(f"prior covers no continents for {len(missing)} species, e.g. {missing[:3]}")
        return cls(species_names=tuple(catalog.names), continent_sets=tuple(sets))


def build_continent_prior(data):
    """Derive the prior from occurrences: continents with >= 1 record.

    Every catalogued species must occur at least once (guaranteed after
    loading, since the catalog is built from the same records).
    """
    sets = [set() for _ in range(data.n_species)]
    for row in range(data.n):
        sets[int(data.species[row])].add(data.continent[row])
    empty = [data.catalog.name_of(i) for i, s in enumerate(sets) if not s]
    if empty:
        raise ValueError(f"species without occurrences: {empty[:5]}")
    return ContinentPrior(
        species_names=tuple(data.catalog.names),
        continent_sets=tuple(frozenset(s) for s in sets),
    )


def filter_by_prior(assemblage, continent, prior):
    """Drop members whose allowed continents exclude ``continent``."""
    if assemblage.is_empty:
        return assemblage
    keep = np.fromiter(
        (continent in prior.continents_of(int(k)) for k in assemblage.members),
        dtype=bool,
        count=assemblage.size,
    )
    weights = assemblage.weights[keep] if assemblage.weights is not None else None
    return Assemblage.from_arrays(assemblage.members[keep], weights)


def renormalize(assemblage):
    """Scale surviving weights to sum to 1.

    An empty or all-zero assemblage comes back as the explicit empty
    value (downstream renders it as nodata); it is not a numeric error.
    """
    if assemblage.is_empty or assemblage.weights is None or assemblage.weights.sum() <= 0.0:
        return Assemblage.empty()
    return Assemblage(
        members=assemblage.members,
        weights=assemblage.weights / assemblage.weights.sum(),
    )
