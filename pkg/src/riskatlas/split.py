"""Spatial block hold-out: block assignment, stratified split, orphan repair.

Occurrences are grouped into square lon/lat blocks so nearby points never
straddle the train/evaluation boundary. Blocks are split 90/5/5 within
per-region strata, and species left without training data get their
blocks pulled back into train wholesale.
"""
from __future__ import annotations

import csv
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .domain import DataError

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")
DEFAULT_BLOCK_SIZE = 0.025
DEFAULT_RATIOS = (0.90, 0.05, 0.05)


def assign_blocks(data, block_size):
    """Map each occurrence to its ``(floor(lon/b), floor(lat/b))`` block.

    Returns an (n, 2) integer array of block coordinates. Standard floor
    semantics: points on a block edge belong to the higher-index block,
    negative coordinates floor downward.
    """
    if block_size <= 0:
        raise ValueError("block size must be positive")
    ij = np.empty((data.n, 2), dtype=np.int64)
    ij[:, 0] = np.floor(data.lon / block_size)
    ij[:, 1] = np.floor(data.lat / block_size)
    return ij


def block_strata(data, block_ij):
    """Majority region per block; ties go to the smallest region id.

    Returns a dict ``(i, j) -> region``. Independent of row order.
    """
    per_block = defaultdict(Counter)
    for row in range(data.n):
        per_block[(int(block_ij[row, 0]), int(block_ij[row, 1]))][data.region[row]] += 1
    strata = {}
    for block, counts in per_block.items():
        # sort by (-count, region) so the max count wins and ties break low
        strata[block] = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return strata


def _round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SplitAssignment:
    """Frozen block -> split map for one dataset.

    ``blocks`` maps ``(i, j)`` to the codes TRAIN/VALIDATION/TEST; every
    occurrence inherits its block's split, so no block ever straddles
    two splits.
    """

    block_size: float
    blocks: dict

    def split_of(self, block):
        return self.blocks[block]

    def occurrence_splits(self, data):
        """Per-occurrence split codes, via each row's block."""
        ij = assign_blocks(data, self.block_size)
        out = np.empty(data.n, dtype=np.int8)
        for row in range(data.n):
            out[row] = self.blocks[(int(ij[row, 0]), int(ij[row, 1]))]
        return out

    def counts(self):
        c = Counter(self.blocks.values())
        return tuple(c.get(s, 0) for s in (TRAIN, VALIDATION, TEST))

    def save(self, path, header_comment=None):
        """Write the audit CSV ``block_i,block_j,split`` in block order."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["block_i", "block_j", "split"])
            for (i, j) in sorted(self.blocks):
                writer.writerow([i, j, SPLIT_NAMES[self.blocks[(i, j)]]])

    @classmethod
    def load(cls, path, block_size):
        blocks = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            lineno_base = 1
            while header and header[0].startswith("#"):
                header = next(reader, None)
                lineno_base += 1
            if header != ["block_i", "block_j", "split"]:
                raise DataError(f"expected header 'block_i,block_j,split', got {header!r}", line=lineno_base)
            for lineno, row in enumerate(reader, start=lineno_base + 1):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    i, j = int(row[0]), int(row[1])
                    code = SPLIT_NAMES.index(row[2])
                except (ValueError, IndexError):
                    raise DataError(f"malformed split row {row!r}", line=lineno) from None
                blocks[(i, j)] = code
        return cls(block_size=block_size, blocks=blocks)


def split_blocks(data, block_size=DEFAULT_BLOCK_SIZE, ratios=DEFAULT_RATIOS, seed=0):
    """Stratified 90/5/5 block split.

    Within each region stratum (majority region of the block),
    validation and test take their ratio share rounded half-up to the
    nearest block; the remainder stays in train. Deterministic for a
    fixed seed; occurrence row order never matters. A region too small
    to populate validation or test keeps everything in train and emits
    a warning.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    ij = assign_blocks(data, block_size)
    strata = block_strata(data, ij)
    by_region = defaultdict(list)
    for block, region in strata.items():
        by_region[region].append(block)

    rng = np.random.default_rng(seed)
    assignment = {}
    for region in sorted(by_region):
        blocks = sorted(by_region[region])
        n = len(blocks)
        n_val = _round_half_up(n * ratios[1])
        n_test = min(_round_half_up(n * ratios[2]), n - n_val)
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            if pos < n_val:
                code = VALIDATION
            elif pos < n_val + n_test:
                code = TEST
            else:
                code = TRAIN
            assignment[blocks[idx]] = code
        if n_val == 0 and n_test == 0:
            warnings.warn(
                f"region {region!r} has only {n} block(s); all assigned to train",
                stacklevel=2,
            )
    return SplitAssignment(block_size=block_size, blocks=assignment)


def repair_orphans(assignment, data):
    """Move blocks of train-orphaned species into train, to fixpoint.

    A species with zero training occurrences gets every block containing
    it reassigned to train (whole blocks move, preserving the spatial
    independence of validation/test). Repeats until no species is
    orphaned; returns the repaired assignment and the number of blocks
    moved.
    """
    ij = assign_blocks(data, assignment.block_size)
    row_blocks = [(int(ij[r, 0]), int(ij[r, 1])) for r in range(data.n)]
    blocks = dict(assignment.blocks)
    moved = 0
    while True:
        train_species = {
            int(data.species[r]) for r in range(data.n) if blocks[row_blocks[r]] == TRAIN
        }
        to_move = {
            row_blocks[r]
            for r in range(data.n)
            if int(data.species[r]) not in train_species and blocks[row_blocks[r]] != TRAIN
        }
        if not to_move:
            break
        for block in to_move:
            blocks[block] = TRAIN
            moved += 1
    return SplitAssignment(block_size=assignment.block_size, blocks=blocks), moved
