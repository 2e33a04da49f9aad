"""Ratings ingestion, splits, one-hot encoding, scale conversion, metrics.

External ids (1-based MovieLens integers, arbitrary strings in CSV) are
remapped to dense 0-based indices in first-appearance order at parse
time; the remap tables ride along on every table so train/test splits
share one id space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .sparse import SparseExchangeableTensor

__all__ = [
    "RatingScale",
    "RatingsTable",
    "FIVE_STAR",
    "parse_ratings",
    "canonical_split",
    "encode_onehot",
    "onehot_to_ratings",
    "rebin_scale",
    "rescale_prediction",
    "synthetic_lowrank_table",
    "rmse",
]


@dataclass(frozen=True)
class RatingScale:
    """An ordered set of admissible rating levels."""

    levels: tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if len(levels) < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must be strictly increasing, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def lo(self) -> float:
        return self.levels[0]

    @property
    def hi(self) -> float:
        return self.levels[-1]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @classmethod
    def integer(cls, lo: int, hi: int) -> "RatingScale":
        return cls(tuple(range(lo, hi + 1)))

    @classmethod
    def half_steps(cls, lo: float, hi: float) -> "RatingScale":
        return cls(tuple(np.arange(lo, hi + 0.25, 0.5)))

    def level_index(self, rating: float) -> int:
        """Position of a rating among the levels; exact membership required."""
        arr = np.asarray(self.levels)
        hits = np.flatnonzero(np.abs(arr - rating) < 1e-9)
        if hits.size != 1:
            raise ValueError(f"rating {rating} is not a level of {self.levels}")
        return int(hits[0])

    def contains(self, rating: float) -> bool:
        return self.lo - 1e-9 <= rating <= self.hi + 1e-9


FIVE_STAR = RatingScale.integer(1, 5)


@dataclass(frozen=True)
class RatingsTable:
    """Observed (user, item, rating) triples over dense 0-based indices.

    ``users``/``items`` map dense index back to the external id; splits
    carry the full tables so all parts agree on matrix dimensions.
    """

    u_index: np.ndarray
    i_index: np.ndarray
    ratings: np.ndarray
    scale: RatingScale
    users: tuple
    items: tuple
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.u_index, dtype=np.int64)
        i = np.asarray(self.i_index, dtype=np.int64)
        r = np.asarray(self.ratings, dtype=np.float64)
        if not (u.shape == i.shape == r.shape) or u.ndim != 1:
            raise ValueError("u_index, i_index, ratings must be equal-length 1-d")
        if u.size and (u.min() < 0 or u.max() >= len(self.users)):
            raise ValueError("user index outside the remap table")
        if i.size and (i.min() < 0 or i.max() >= len(self.items)):
            raise ValueError("item index outside the remap table")
        if u.size:
            flat = u * len(self.items) + i
            if np.unique(flat).size != flat.size:
                dup = flat[np.argsort(flat)]
                at = np.flatnonzero(np.diff(dup) == 0)[0]
                raise ValueError(
                    f"duplicate rating for user/item pair "
                    f"{divmod(int(dup[at]), len(self.items))}"
                )
            if (r < self.scale.lo - 1e-9).any() or (r > self.scale.hi + 1e-9).any():
                bad = r[(r < self.scale.lo - 1e-9) | (r > self.scale.hi + 1e-9)][0]
                raise ValueError(f"rating {bad} outside scale "
                                 f"[{self.scale.lo}, {self.scale.hi}]")
        object.__setattr__(self, "u_index", u)
        object.__setattr__(self, "i_index", i)
        object.__setattr__(self, "ratings", r)
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_ratings(self) -> int:
        return self.ratings.shape[0]

    @property
    def sparsity(self) -> float:
        return self.n_ratings / (self.n_users * self.n_items)

    def summary(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "ratings": self.n_ratings,
            "sparsity": self.sparsity,
        }

    def subset(self, rows: np.ndarray) -> "RatingsTable":
        """Rows selected by index array; remap tables are kept whole."""
        ts = None if self.timestamps is None else self.timestamps[rows]
        return RatingsTable(
            self.u_index[rows], self.i_index[rows], self.ratings[rows],
            self.scale, self.users, self.items, ts,
        )

    def indices(self) -> np.ndarray:
        return np.column_stack([self.u_index, self.i_index])


def _read_triples(path, fmt: str, delimiter: str = ","):
    """Raw (user, item, rating, timestamp) columns with 1-based line errors."""
    users, items, ratings, stamps = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if fmt == "movielens-tab":
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(
                        f"{path}:{lineno}: expected 4 tab-separated fields, "
                        f"got {len(parts)}"
                    )
                u, i, r, ts = parts
            elif fmt == "csv-triples":
                parts = next(csv.reader([line], delimiter=delimiter))
                if len(parts) not in (3, 4):
                    raise ValueError(
                        f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}"
                    )
                u, i, r = parts[0], parts[1], parts[2]
                ts = parts[3] if len(parts) == 4 else ""
            else:
                raise ValueError(f"unknown format {fmt!r}")
            try:
                rating = float(r)
            except ValueError:
                if lineno == 1 and fmt == "csv-triples":
                    continue  # header row
                raise ValueError(f"{path}:{lineno}: bad rating field {r!r}")
            users.append(u.strip())
            items.append(i.strip())
            ratings.append(rating)
            stamps.append(ts.strip())
    if not users:
        raise ValueError(f"{path}: no ratings found")
    return users, items, ratings, stamps


def _first_appearance_remap(ids, table: dict, order: list):
    out = np.empty(len(ids), dtype=np.int64)
    for k, ext in enumerate(ids):
        if ext not in table:
            table[ext] = len(order)
            order.append(ext)
        out[k] = table[ext]
    return out


def parse_ratings(
    path,
    fmt: str = "movielens-tab",
    scale: RatingScale = FIVE_STAR,
    delimiter: str = ",",
) -> RatingsTable:
    """Load a ratings file; ids become dense indices in first-appearance
    order and every rating is checked against the scale bounds."""
    users, items, ratings, stamps = _read_triples(path, fmt, delimiter)
    for k, r in enumerate(ratings):
        if not scale.contains(r):
            raise ValueError(
                f"{path}: rating {r} outside scale [{scale.lo}, {scale.hi}]"
            )
    umap: dict = {}
    imap: dict = {}
    uorder: list = []
    iorder: list = []
    u_idx = _first_appearance_remap(users, umap, uorder)
    i_idx = _first_appearance_remap(items, imap, iorder)
    ts = np.array([int(s) if s else 0 for s in stamps], dtype=np.int64)
    return RatingsTable(
        u_idx, i_idx, np.asarray(ratings), scale, tuple(uorder), tuple(iorder), ts
    )


def canonical_split(
    table: RatingsTable | None,
    mode: str,
    fraction: float = 0.2,
    seed: int = 0,
    val_fraction: float = 0.0,
    base_path=None,
    test_path=None,
    fmt: str = "movielens-tab",
    scale: RatingScale = FIVE_STAR,
    delimiter: str = ",",
):
    """Split ratings into train/test (and optionally validation).

    mode="random" draws round(fraction * n) test rows (plus a validation
    slice) without replacement from ``table``.  mode="file-pair" reads two
    files that publish the split and remaps them jointly so both halves
    agree on the id space.
    """
    if mode == "random":
        if table is None:
            raise ValueError("random split needs a table")
        if not 0.0 <= fraction < 1.0 or not 0.0 <= val_fraction < 1.0 \
                or fraction + val_fraction >= 1.0:
            raise ValueError("fractions must be in [0, 1) and sum below 1")
        n = table.n_ratings
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
        n_test = int(round(fraction * n))
        n_val = int(round(val_fraction * n))
        test = table.subset(np.sort(order[:n_test]))
        val = table.subset(np.sort(order[n_test : n_test + n_val]))
        train = table.subset(np.sort(order[n_test + n_val :]))
        return (train, test, val) if val_fraction > 0 else (train, test)
    if mode == "file-pair":
        ub, ib, rb, tb = _read_triples(base_path, fmt, delimiter)
        ut, it, rt, tt = _read_triples(test_path, fmt, delimiter)
        for r in rb + rt:
            if not scale.contains(r):
                raise ValueError(f"rating {r} outside scale "
                                 f"[{scale.lo}, {scale.hi}]")
        umap: dict = {}
        imap: dict = {}
        uorder: list = []
        iorder: list = []
        ub_idx = _first_appearance_remap(ub, umap, uorder)
        ib_idx = _first_appearance_remap(ib, imap, iorder)
        ut_idx = _first_appearance_remap(ut, umap, uorder)
        it_idx = _first_appearance_remap(it, imap, iorder)
        users, items = tuple(uorder), tuple(iorder)
        base_cells = set(zip(ub_idx.tolist(), ib_idx.tolist()))
        overlap = base_cells & set(zip(ut_idx.tolist(), it_idx.tolist()))
        if overlap:
            u, i = next(iter(overlap))
            raise ValueError(
                f"user {users[u]!r} / item {items[i]!r} appears in both files"
            )
        train = RatingsTable(
            ub_idx, ib_idx, np.asarray(rb), scale, users, items,
            np.array([int(s) if s else 0 for s in tb]),
        )
        test = RatingsTable(
            ut_idx, it_idx, np.asarray(rt), scale, users, items,
            np.array([int(s) if s else 0 for s in tt]),
        )
        return train, test
    raise ValueError(f"unknown split mode {mode!r}")


def encode_onehot(
    table: RatingsTable, scale: RatingScale | None = None
) -> SparseExchangeableTensor:
    """Users x items matrix whose channel vector is the rating's one-hot."""
    scale = scale or table.scale
    levels = np.asarray(scale.levels)
    pos = np.searchsorted(levels, table.ratings)
    pos = np.clip(pos, 0, len(levels) - 1)
    # searchsorted gives a candidate; demand an exact level match
    near = np.abs(levels[pos] - table.ratings) < 1e-9
    alt = np.clip(pos - 1, 0, len(levels) - 1)
    near_alt = np.abs(levels[alt] - table.ratings) < 1e-9
    pos = np.where(near, pos, alt)
    if not (near | near_alt).all():
        bad = table.ratings[~(near | near_alt)][0]
        raise ValueError(f"rating {bad} is not a level of {scale.levels}")
    values = np.zeros((table.n_ratings, scale.n_levels))
    values[np.arange(table.n_ratings), pos] = 1.0
    return SparseExchangeableTensor(
        (table.n_users, table.n_items), table.indices(), values
    )


def onehot_to_ratings(
    t: SparseExchangeableTensor, scale: RatingScale
) -> np.ndarray:
    """Rating level per observed cell, aligned with t.indices."""
    if t.channels != scale.n_levels:
        raise ValueError(
            f"{t.channels} channels vs {scale.n_levels} rating levels"
        )
    return np.asarray(scale.levels)[t.values.argmax(axis=1)]


def _linear_map(value, src: RatingScale, dst: RatingScale):
    span_src = src.hi - src.lo
    span_dst = dst.hi - dst.lo
    if span_src == 0:
        return np.full_like(np.asarray(value, dtype=np.float64), dst.lo)
    return (np.asarray(value, dtype=np.float64) - src.lo) / span_src * span_dst + dst.lo


def rebin_scale(rating, src: RatingScale, dst: RatingScale):
    """Map ratings between scales, landing exactly on a destination level.

    Linear endpoint-to-endpoint map, round half away from zero, then snap
    to the nearest level (ties toward the higher level).
    """
    arr = np.asarray(rating, dtype=np.float64)
    if (arr < src.lo - 1e-9).any() or (arr > src.hi + 1e-9).any():
        raise ValueError(f"rating outside source scale [{src.lo}, {src.hi}]")
    mapped = _linear_map(arr, src, dst)
    rounded = np.sign(mapped) * np.floor(np.abs(mapped) + 0.5)
    rounded = np.clip(rounded, dst.lo, dst.hi)
    levels = np.asarray(dst.levels)
    gaps = np.abs(levels[None, ...] - np.atleast_1d(rounded)[..., None])
    # argmax over reversed levels breaks distance ties toward the higher one
    nearest = levels.size - 1 - np.argmin(gaps[:, ::-1], axis=1)
    out = levels[nearest]
    return out.reshape(arr.shape) if arr.shape else float(out[0])


def rescale_prediction(value, src: RatingScale, dst: RatingScale):
    """Exact inverse linear map between scales; no rounding."""
    arr = np.asarray(value, dtype=np.float64)
    if (arr < src.lo - 1e-9).any() or (arr > src.hi + 1e-9).any():
        raise ValueError(f"value outside source scale [{src.lo}, {src.hi}]")
    out = _linear_map(arr, src, dst)
    return float(out) if out.ndim == 0 else out


def synthetic_lowrank_table(
    n_rows: int = 50,
    n_cols: int = 60,
    rank: int = 2,
    observed_fraction: float = 0.3,
    seed: int = 0,
    scale: RatingScale = FIVE_STAR,
    mean_shift: float = 1.2,
    level_gain: float = 1.0,
) -> RatingsTable:
    """Quantized low-rank ratings for benchmarks.

    Scores are U V^T / sqrt(rank) with standard normal factors whose
    first coordinate is shifted by ``mean_shift``.  The shift gives rows
    and columns realistic popularity biases (first-order structure) on
    top of the rank-``rank`` interaction, which plain zero-mean factors
    would lack.  Scores are standardized, then mapped onto the scale by
    ``index = clip(offset_round(center + level_gain * score))`` where
    center is the middle of the level index range; one level per
    standard deviation at the default gain.  A uniform cell subset of
    the requested size is kept.  Fully reproducible from the seed.
    """
    if not 0.0 < observed_fraction <= 1.0:
        raise ValueError("observed fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_rows, rank))
    v = rng.normal(size=(n_cols, rank))
    u[:, 0] += mean_shift
    v[:, 0] += mean_shift
    scores = u @ v.T / np.sqrt(rank)
    scores = (scores - scores.mean()) / scores.std()
    center = (scale.n_levels - 1) / 2.0
    idx = np.floor(center + level_gain * scores + 0.5).astype(int)
    idx = np.clip(idx, 0, scale.n_levels - 1)
    ratings_full = np.asarray(scale.levels)[idx]
    n_obs = int(round(observed_fraction * n_rows * n_cols))
    cells = rng.choice(n_rows * n_cols, size=max(1, n_obs), replace=False)
    r, c = np.unravel_index(cells, (n_rows, n_cols))
    return RatingsTable(
        r, c, ratings_full[r, c], scale,
        tuple(range(n_rows)), tuple(range(n_cols)),
    )


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))
