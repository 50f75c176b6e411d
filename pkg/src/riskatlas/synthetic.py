"""Synthetic worlds with known structure, for tests and demos.

Three generators: an abstract Gaussian-niche mixture in covariate space
(exact posterior available), a geographic world that writes the full
file set the CLI consumes, and a two-species world with a planted
east/west partition whose recovery can be scored cell by cell.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .grids import FeatureStack, GridSpec, RasterLayer, KIND_STATUS, STATUS_NODATA, save_feature_stack, write_ascii
from .model import softmax

STATUS_CYCLE = ("LC", "NT", "VU", "EN", "CR")


@dataclass(frozen=True)
class GaussianWorld:
    """Isotropic Gaussian class-conditional mixture over D covariates.

    Sampling draws a species from ``priors`` and a point from its
    niche; the exact posterior is a softmax of linear logits, so a
    linear model can represent it and tests can compare against the
    analytic truth.
    """

    centers: np.ndarray  # (C, D)
    sigma: float
    priors: np.ndarray  # (C,)

    @property
    def n_species(self):
        return self.centers.shape[0]

    @property
    def n_features(self):
        return self.centers.shape[1]

    def sample(self, n, rng):
        y = rng.choice(self.n_species, size=n, p=self.priors)
        x = self.centers[y] + rng.normal(0.0, self.sigma, size=(n, self.n_features))
        return x, y

    def true_proba(self, x):
        """Exact posterior P(species | x)."""
        x = np.asarray(x, dtype=np.float64)
        s2 = self.sigma**2
        logits = (
            x @ self.centers.T / s2
            - (self.centers**2).sum(axis=1) / (2.0 * s2)
            + np.log(self.priors)
        )
        return softmax(logits)


def make_gaussian_world(n_species=50, n_features=4, seed=0, sigma=0.12, balanced=False):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.1, 0.9, size=(n_species, n_features))
    if balanced:
        priors = np.full(n_species, 1.0 / n_species)
    else:
        priors = rng.dirichlet(np.full(n_species, 5.0))
    return GaussianWorld(centers=centers, sigma=sigma, priors=priors)


@dataclass(frozen=True)
class GeoWorld:
    """Species with Gaussian ranges on a unit lon/lat square.

    Regions are the four quadrants, continents split west/east at
    lon 0.5. Species statuses cycle LC..CR; every seventh species has
    no status at all, odd ids are predicted-only, and species 0 gets a
    conflicting predicted status to exercise precedence.
    """

    centers: np.ndarray  # (C, 2) lon/lat niche centers
    sigma: float
    priors: np.ndarray

    @property
    def n_species(self):
        return self.centers.shape[0]

    def species_name(self, k):
        return f"sp{k:03d}"

    def sample_occurrences(self, n, rng):
        y = rng.choice(self.n_species, size=n, p=self.priors)
        pts = self.centers[y] + rng.normal(0.0, self.sigma, size=(n, 2))
        pts = np.clip(pts, 0.001, 0.999)
        return pts[:, 0], pts[:, 1], y

    @staticmethod
    def region_of(lon, lat):
        return f"R{2 * int(lat > 0.5) + int(lon > 0.5)}"

    @staticmethod
    def continent_of(lon):
        return "W" if lon <= 0.5 else "E"

    def write_occurrences(self, path, n, rng):
        lons, lats, ys = self.sample_occurrences(n, rng)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["species", "lon", "lat", "region", "continent"])
            for lon, lat, y in zip(lons, lats, ys):
                writer.writerow(
             [self.species_name(int(y)), f"{lon:.6f}", f"{lat:.6f}",
              self.region_of(lon, lat), self.continent_of(lon)]
                )
        return path

    def status_rows(self):
        rows = []
        for k in range(self.n_species):
            if k % 7 == 3:
                continue  # deliberately status-less
            status = STATUS_CYCLE[k % 5]
            source = "predicted" if k % 2 else "assessed"
            rows.append((self.species_name(k), status, source))
        rows.append((self.species_name(0), STATUS_CYCLE[4], "predicted"))
        return rows

    def write_statuses(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["species", "status", "source"])
            writer.writerows(self.status_rows())
        return path

    def grid(self, n_cells=100):
        step = 1.0 / n_cells
        half = step / 2.0
        return GridSpec(lon0=half, lon1=1.0 - half, lat0=half, lat1=1.0 - half, step=step)

    def build_stack(self, n_cells=100, lake=True, nan_cells=0):
        """Covariate stack on an ``n_cells`` square grid.

        Bands: a lon gradient, a lat gradient, and one smooth nonlinear
        mix. ``lake`` opens a round water hole in the northeast;
        ``nan_cells`` punches NaN feature holes for gap handling tests.
        """
        grid = self.grid(n_cells)
        lons = grid.lons()[None, :] * np.ones((grid.nrows, 1))
        lats = grid.lats()[:, None] * np.ones((1, grid.ncols))
        band_lon = lons.copy()
        band_lat = lats.copy()
        band_mix = np.sin(3.0 * np.pi * lons) * np.cos(2.0 * np.pi * lats)
        land = np.ones(lons.shape, dtype=bool)
        if lake:
            land &= (lons - 0.75) ** 2 + (lats - 0.75) ** 2 > 0.01
        if nan_cells:
            flat = np.ravel_multi_index(
                (np.arange(nan_cells) * 7 % grid.nrows, np.arange(nan_cells) * 13 % grid.ncols),
                lons.shape,
            )
            band_mix.ravel()[flat] = np.nan
        continent_ids = np.where(land, (lons > 0.5).astype(np.int32), -1)
        return FeatureStack(
            grid=grid,
            band_names=("b_lon", "b_lat", "b_mix"),
            bands=(band_lon, band_lat, band_mix),
            band_kinds=("continuous", "continuous", "continuous"),
            land=land,
            continent_ids=continent_ids,
            continent_names=("W", "E"),
        )

    def region_raster(self, n_cells=100):
        grid = self.grid(n_cells)
        lons = grid.lons()[None, :] * np.ones((grid.nrows, 1))
        lats = grid.lats()[:, None] * np.ones((1, grid.ncols))
        ids = (2 * (lats > 0.5) + (lons > 0.5)).astype(np.int32)
        names = {i: f"R{i}" for i in range(4)}
        return RasterLayer(grid=grid, values=ids, nodata=STATUS_NODATA, kind=KIND_STATUS), names

    def write_world(self, directory, n_occurrences=4000, seed=0, n_cells=100, nan_cells=0):
        """Write every input file the CLI needs; returns the path map."""
        os.makedirs(directory, exist_ok=True)
        rng = np.random.default_rng(seed)
        paths = {}
        paths["occurrences"] = self.write_occurrences(
            os.path.join(directory, "occurrences.csv"), n_occurrences, rng
        )
        paths["statuses"] = self.write_statuses(os.path.join(directory, "statuses.csv"))
        stack = self.build_stack(n_cells=n_cells, nan_cells=nan_cells)
        paths["stack"] = save_feature_stack(stack, os.path.join(directory, "stack"))
        region_layer, region_names = self.region_raster(n_cells=n_cells)
        paths["regions"] = os.path.join(directory, "regions.asc")
        write_ascii(region_layer, paths["regions"])
        paths["region_catalog"] = os.path.join(directory, "regions.csv")
        with open(paths["region_catalog"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region_id", "name"])
            for rid in sorted(region_names):
                writer.writerow([rid, region_names[rid]])
        return paths


def make_geo_world(n_species=12, seed=0, sigma=0.08):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.12, 0.88, size=(n_species, 2))
    priors = rng.dirichlet(np.full(n_species, 6.0))
    return GeoWorld(centers=centers, sigma=sigma, priors=priors)


@dataclass(frozen=True)
class PartitionWorld:
    """Two species split east/west at lon 0.5 with a sharp posterior.

    Species A (LC) owns lon < 0.5, species B (CR) the rest. Sampling
    mixes broad draws around the niche centers with a thin sliver of
    boundary points so threshold calibration sees genuinely ambiguous
    cases; labels always come from the true posterior.
    """

    center_a: float = 0.25
    center_b: float = 0.75
    posterior_sigma: float = 0.02
    sample_sigma: float = 0.08
    boundary_frac: float = 0.05
    boundary_halfwidth: float = 0.0025

    def posterior_b(self, lon):
        """P(species B | lon) under the sharp niche model."""
        lon = np.asarray(lon, dtype=np.float64)
        scale = self.posterior_sigma**2 / (self.center_b - self.center_a)
        return 1.0 / (1.0 + np.exp(-(lon - 0.5) / scale))

    def sample(self, n, rng):
        """Returns (lon, lat, label) with labels from the posterior."""
        n_boundary = int(round(n * self.boundary_frac))
        n_broad = n - n_boundary
        side = rng.integers(0, 2, size=n_broad)
        lon_broad = np.where(side == 0, self.center_a, self.center_b) + rng.normal(
            0.0, self.sample_sigma, size=n_broad
        )
        lon_boundary = rng.uniform(
            0.5 - self.boundary_halfwidth, 0.5 + self.boundary_halfwidth, size=n_boundary
        )
        lon = np.clip(np.concatenate([lon_broad, lon_boundary]), 0.001, 0.999)
        rng.shuffle(lon)
        lat = rng.uniform(0.0, 1.0, size=n)
        label = (rng.uniform(size=n) < self.posterior_b(lon)).astype(np.int64)
        return lon, lat, label

    def planted_io(self, grid):
        """Ground-truth worst-status raster: LC west, CR east."""
        lons = grid.lons()[None, :] * np.ones((grid.nrows, 1))
        return np.where(lons < 0.5, 0, 4).astype(np.int8)

    def build_stack(self, n_cells=100):
        grid = GridSpec(
            lon0=0.5 / n_cells, lon1=1.0 - 0.5 / n_cells,
            lat0=0.5 / n_cells, lat1=1.0 - 0.5 / n_cells,
            step=1.0 / n_cells,
        )
        lons = grid.lons()[None, :] * np.ones((grid.nrows, 1))
        land = np.ones(lons.shape, dtype=bool)
        return FeatureStack(
            grid=grid,
            band_names=("b_lon",),
            bands=(lons,),
            band_kinds=("continuous",),
            land=land,
            continent_ids=np.zeros(lons.shape, dtype=np.int32),
            continent_names=("X",),
        )
