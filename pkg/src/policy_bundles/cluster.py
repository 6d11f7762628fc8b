"""Gower dissimilarity, complete-linkage agglomeration, tree cutting and elbow selection."""
from __future__ import annotations

import csv
import warnings
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .ingest import StateYearPolicyMatrix

BINARY_MODES = ("symmetric", "asymmetric")


@dataclass(frozen=True, eq=False)
class DissimilarityMatrix:
    keys: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        n = len(self.keys)
        if values.shape != (n, n):
            raise DataError(f"dissimilarity shape {values.shape} does not match {n} keys")
        if not np.array_equal(values, values.T):
            raise DataError("dissimilarity matrix is not symmetric")
        if np.any(np.diag(values) != 0):
            raise DataError("dissimilarity matrix has a nonzero diagonal")
        if values.size and (values.min() < 0 or values.max() > 1):
            raise DataError("dissimilarities must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.keys)


def _gower_block(x, rowsum, lo, hi, p, asymmetric):
    xb = x[lo:hi]
    # float64 products of 0/1 data are exact integer counts
    both = np.rint(xb @ x.T)
    mismatch = rowsum[lo:hi, None] + rowsum[None, :] - 2.0 * both
    if not asymmetric:
        return mismatch / p, 0
    denom = mismatch + both
    out = np.zeros_like(mismatch)
    np.divide(mismatch, denom, out=out, where=denom > 0)
    empty = denom == 0
    empty[np.arange(hi - lo), np.arange(lo, hi)] = False
    return out, int(empty.sum())


def gower_dissimilarity(
    matrix: StateYearPolicyMatrix, binary_mode: str = "symmetric", workers: int = 1
) -> DissimilarityMatrix:
    """Gower dissimilarity between the rows of a binary policy matrix.

    In symmetric mode this is the share of columns where two rows differ.
    In asymmetric mode columns where both rows are 0 are ignored; a pair
    with no informative column gets dissimilarity 0 and a warning.

    ``workers > 1`` computes row blocks in threads.  Each cell is computed
    independently, so the result does not depend on ``workers``.
    """
    if binary_mode not in BINARY_MODES:
        raise ConfigError(f"binary_mode must be one of {BINARY_MODES}, got {binary_mode!r}")
    n, p = matrix.shape
    if n < 2:
        raise DataError("Gower dissimilarity needs at least two rows")
    if p < 1:
        raise DataError("Gower dissimilarity needs at least one column")
    x = matrix.cells.astype(np.float64)
    rowsum = x.sum(axis=1)
    asym = binary_mode == "asymmetric"
    block = max(1, -(-n // max(1, 4 * workers)))
    bounds = [(lo, min(n, lo + block)) for lo in range(0, n, block)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _gower_block(x, rowsum, *b, p, asym), bounds))
    else:
        parts = [_gower_block(x, rowsum, lo, hi, p, asym) for lo, hi in bounds]
    values = np.vstack([v for v, _ in parts])
    n_empty = sum(e for _, e in parts) // 2
    if n_empty:
        warnings.warn(f"{n_empty} row pairs share no informative column; dissimilarity set to 0",
                      stacklevel=2)
    np.fill_diagonal(values, 0.0)
    return DissimilarityMatrix(matrix.row_keys, values)


@dataclass(frozen=True)
class Dendrogram:
    """Merge tree.

    Node ids follow the usual array convention: leaves are ``0..n-1`` and
    the cluster created at merge step ``s`` is ``n + s``.  ``merges[s]`` is
    ``(left, right, height)`` where ``left`` holds the smaller leaf index.
    """

    leaf_keys: tuple
    merges: tuple

    @property
    def n_leaves(self):
        return len(self.leaf_keys)

    @property
    def heights(self):
        return np.array([h for _, _, h in self.merges], dtype=np.float64)

    def to_rows(self):
        """Merge list in the negative-leaf / positive-step convention.

        Leaves are ``-1..-n`` and the cluster from step ``s`` (1-based) is ``s``.
        """
        n = self.n_leaves

        def ext(node):
            return -(node + 1) if node < n else node - n + 1

        return [(s + 1, ext(a), ext(b), h) for s, (a, b, h) in enumerate(self.merges)]


def agglomerate_complete_linkage(D: DissimilarityMatrix, linkage: str = "complete") -> Dendrogram:
    """Complete-linkage agglomerative clustering.

    At each step the two active clusters at minimal distance are merged;
    the merged cluster's distance to any other is the max of its parts'.
    Ties go to the pair whose smallest leaf indices are lexicographically
    smallest, so the tree is fully determined by ``D``.

    Each active cluster lives in the matrix row of its smallest leaf, and a
    per-row nearest-neighbour cache keeps most steps at O(n).
    """
    if linkage != "complete":
        raise ConfigError(f"only complete linkage is supported, got {linkage!r}")
    n = len(D)
    m = np.array(D.values, dtype=np.float64, copy=True)
    np.fill_diagonal(m, np.inf)
    active = np.ones(n, dtype=bool)
    node = np.arange(n)
    nn_idx = np.argmin(m, axis=1) if n > 1 else np.zeros(n, dtype=int)
    nn_val = m[np.arange(n), nn_idx] if n > 1 else np.zeros(n)
    merges = []
    for step in range(n - 1):
        i = int(np.argmin(np.where(active, nn_val, np.inf)))
        j = int(nn_idx[i])
        height = float(nn_val[i])
        merges.append((int(node[i]), int(node[j]), height))

        merged = np.maximum(m[i], m[j])
        merged[i] = np.inf
        merged[j] = np.inf
        m[i, :] = merged
        m[:, i] = merged
        m[j, :] = np.inf
        m[:, j] = np.inf
        active[j] = False
        node[i] = n + step

        stale_mask = active & ((nn_idx == i) | (nn_idx == j))
        stale = np.flatnonzero(stale_mask)
        # the merged cluster can only be farther, but it may tie a cached
        # neighbour and win on index
        col = m[:, i]
        better = active & ~stale_mask & ((col < nn_val) | ((col == nn_val) & (i < nn_idx)))
        nn_idx[better] = i
        nn_val[better] = col[better]
        for r in np.union1d(stale, [i]):
            k = int(np.argmin(m[r]))
            nn_idx[r] = k
            nn_val[r] = m[r, k]
    return Dendrogram(tuple(D.keys), tuple(merges))


class ClusterAssignment(Mapping):
    """Mapping ``(state, year) -> label`` with labels ``1..k``.

    Label 1 is the cluster of the first leaf in input order, label 2 the next
    new cluster met in that order, and so on.
    """

    def __init__(self, keys: Sequence, labels: Sequence[int], k: int):
        self.keys_ = tuple(keys)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.labels.flags.writeable = False
        self.k = int(k)
        self._index = {key: i for i, key in enumerate(self.keys_)}

    def __getitem__(self, key):
        return int(self.labels[self._index[key]])

    def __iter__(self):
        return iter(self.keys_)

    def __len__(self):
        return len(self.keys_)

    def counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in range(1, self.k + 1)}

    def members(self, label: int) -> list:
        return [key for key, lab in zip(self.keys_, self.labels) if lab == label]


def _first_occurrence_labels(roots):
    seen: dict[int, int] = {}
    return [seen.setdefault(r, len(seen) + 1) for r in roots]


def cut_tree(dendrogram: Dendrogram, k: int) -> ClusterAssignment:
    """Partition obtained by undoing the last ``k - 1`` merges."""
    n = dendrogram.n_leaves
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    parent = list(range(2 * n - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for step, (a, b, _) in enumerate(dendrogram.merges[: n - k]):
        parent[find(a)] = n + step
        parent[find(b)] = n + step
    labels = _first_occurrence_labels([find(i) for i in range(n)])
    return ClusterAssignment(dendrogram.leaf_keys, labels, k)


def within_dissimilarity(D: DissimilarityMatrix, labels) -> float:
    """Sum of dissimilarities over unordered within-cluster pairs."""
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) > 1:
            total += float(D.values[np.ix_(idx, idx)].sum()) / 2.0
    return total


@dataclass(frozen=True)
class ElbowCurve:
    ks: tuple
    within: tuple
    explainability: tuple
    second_difference: tuple
    suggested_k: int | None

    def rows(self):
        for k, w, e, d2 in zip(self.ks, self.within, self.explainability, self.second_difference):
            yield k, w, e, d2


def elbow_curve(dendrogram: Dendrogram, D: DissimilarityMatrix, k_range=None) -> ElbowCurve:
    """Within-cluster dissimilarity W(k) along the tree, with an advisory k.

    Explainability is ``1 - W(k)/W(1)``.  The suggestion is the interior k
    maximising ``W(k-1) - 2 W(k) + W(k+1)``; the smallest such k wins ties.
    ``k_range`` is an inclusive ``(k_min, k_max)`` pair or an iterable of
    consecutive integers; default ``1..min(n, 30)``.
    """
    n = dendrogram.n_leaves
    if k_range is None:
        ks = list(range(1, min(n, 30) + 1))
    elif isinstance(k_range, tuple) and len(k_range) == 2:
        ks = list(range(k_range[0], k_range[1] + 1))
    else:
        ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > n:
        raise ConfigError(f"k_range must lie within [1, {n}]")
    if any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise ConfigError("k_range must be consecutive")
    w = [within_dissimilarity(D, cut_tree(dendrogram, k).labels) for k in ks]
    w1 = w[0] if ks[0] == 1 else within_dissimilarity(D, np.zeros(n))
    if w1 > 0:
        e = [1.0 - x / w1 for x in w]
    else:
        e = [0.0 if k == 1 else 1.0 for k in ks]
    d2 = [float("nan")] * len(ks)
    for i in range(1, len(ks) - 1):
        d2[i] = w[i - 1] - 2.0 * w[i] + w[i + 1]
    suggested = None
    if len(ks) >= 3:
        best = max(range(1, len(ks) - 1), key=lambda i: (d2[i], -i))
        suggested = ks[best]
    return ElbowCurve(tuple(ks), tuple(w), tuple(e), tuple(d2), suggested)


@dataclass(frozen=True)
class ClusterProfile:
    cluster: int
    n_members: int
    group_proportions: dict = field(default_factory=dict)
    universal_policies: tuple = ()


def summarize_clusters(
    assignment: ClusterAssignment, matrix: StateYearPolicyMatrix, policy_group_map: Mapping
) -> list[ClusterProfile]:
    """Per-cluster size, mean in-force share by policy group, and the policies
    in force in every member state-year.  Unmapped policies fall into
    ``"ungrouped"``."""
    index = {key: i for i, key in enumerate(matrix.row_keys)}
    missing = [key for key in index if key not in assignment]
    if missing:
        raise DataError(f"matrix rows without a cluster assignment: {missing[:5]}")
    groups = [policy_group_map.get(p, "ungrouped") for p in matrix.col_keys]
    group_names = sorted(set(groups))
    group_cols = {g: [j for j, x in enumerate(groups) if x == g] for g in group_names}
    profiles = []
    labels = np.array([assignment[key] for key in matrix.row_keys])
    for c in range(1, assignment.k + 1):
        rows = matrix.cells[labels == c]
        if len(rows) == 0:
            profiles.append(ClusterProfile(c, 0, {g: 0.0 for g in group_names}, ()))
            continue
        props = {g: float(rows[:, cols].mean()) for g, cols in group_cols.items()}
        universal = tuple(p for p, on in zip(matrix.col_keys, rows.min(axis=0)) if on == 1)
        profiles.append(ClusterProfile(c, len(rows), props, universal))
    return profiles


# -- exports ----------------------------------------------------------------


def _key(key):
    return f"{key[0]}:{key[1]}" if isinstance(key, tuple) else str(key)


def write_dissimilarity(D: DissimilarityMatrix, stream) -> None:
    """Header of row keys, then one line per row with its lower-triangle entries."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["key", *(_key(k) for k in D.keys)])
    for i, key in enumerate(D.keys):
        writer.writerow([_key(key), *(repr(float(v)) for v in D.values[i, :i])])


def write_dendrogram(dendrogram: Dendrogram, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["step", "left", "right", "height"])
    for step, a, b, h in dendrogram.to_rows():
        writer.writerow([step, a, b, repr(float(h))])


def write_assignment(assignment: ClusterAssignment, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["state", "year", "cluster"])
    for (state, year), label in zip(assignment.keys_, assignment.labels):
        writer.writerow([state, year, int(label)])


def read_assignment(stream) -> dict:
    reader = csv.reader(stream)
    labels = {}
    for fields in reader:
        if not fields or fields[0] == "state":
            continue
        labels[fields[0], int(fields[1])] = int(fields[2])
    return labels


def write_elbow(curve: ElbowCurve, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["k", "within", "explainability", "second_difference", "suggested"])
    for k, w, e, d2 in curve.rows():
        writer.writerow([k, repr(w), repr(e), "" if np.isnan(d2) else repr(d2),
                         int(k == curve.suggested_k)])


def profiles_to_dict(profiles: Sequence[ClusterProfile]) -> list[dict]:
    return [
        {
            "cluster": p.cluster,
            "n_members": p.n_members,
            "group_proportions": dict(sorted(p.group_proportions.items())),
            "universal_policies": list(p.universal_policies),
        }
        for p in profiles
    ]
