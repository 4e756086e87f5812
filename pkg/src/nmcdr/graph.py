"""Per-domain interaction graphs, head/tail labels and matching-neighbor sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DomainIndex, DomainSplit
from .numerics import Record, SparseConst, Tensor
from .seeding import stream


class GraphError(ValueError):
    pass


def _csr(rows, cols, n_rows):
    order = np.lexsort((cols, rows))
    counts = np.bincount(rows, minlength=n_rows)
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64), cols[order].astype(np.int64)


@dataclass
class InteractionGraph:
    """Bipartite train-only adjacency of one domain, in CSR form from both sides."""

    n_users: int
    n_items: int
    user_indptr: np.ndarray
    user_items: np.ndarray
    item_indptr: np.ndarray
    item_users: np.ndarray

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def n_edges(self) -> int:
        return len(self.user_items)

    def neighbors(self, u: int) -> np.ndarray:
        return self.user_items[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_neighbors(self, j: int) -> np.ndarray:
        return self.item_users[self.item_indptr[j]:self.item_indptr[j + 1]]

    def edge_users(self) -> np.ndarray:
        """User id of each CSR edge (edges are grouped by user)."""
        return np.repeat(np.arange(self.n_users), self.degree)

    def mean_items(self) -> SparseConst:
        """Row-normalised user x item adjacency (the 1/|N_u| aggregation)."""
        deg = self.degree
        return SparseConst(self.user_indptr, self.user_items,
                           1.0 / np.repeat(deg, deg), (self.n_users, self.n_items))


def build_graph(dom: DomainIndex, dsplit: DomainSplit) -> InteractionGraph:
    """Adjacency from the split's train edges only."""
    n_u, n_i = dom.n_users, dom.n_items
    u, i = dsplit.train_user, dsplit.train_item
    empty = np.flatnonzero(np.bincount(u, minlength=n_u) == 0)
    if len(empty):
        raise GraphError(f"domain {dom.name!r}: {len(empty)} users have no train interactions "
                         f"(first: {empty[:5].tolist()})")
    uptr, uitems = _csr(u, i, n_u)
    iptr, iusers = _csr(i, u, n_i)
    return InteractionGraph(n_u, n_i, uptr, uitems, iptr, iusers)


def label_head_tail(graph: InteractionGraph, k_head: int = 7) -> np.ndarray:
    """Boolean head mask: a user is head iff their train degree exceeds ``k_head``."""
    if k_head < 0:
        raise ValueError("K_head must be >= 0")
    return graph.degree > k_head


@dataclass
class Aggregator:
    """Mean of a source table's rows over one neighbor set per target row.

    Two representations: ``sparse`` holds explicit sampled sets with 1/|set|
    weights; otherwise every row's set is ``pool`` minus ``exclude[row]``,
    which is evaluated in O(rows + pool) without materialising the pairs.
    Rows with an empty set aggregate to zero.
    """

    n_rows: int
    n_src: int
    counts: np.ndarray
    sparse: SparseConst | None = None
    pool: np.ndarray | None = None  # sorted source ids
    exclude: np.ndarray | None = None  # per row, -1 if nothing to remove
    _drop: SparseConst | None = None

    @property
    def exact(self) -> bool:
        return self.sparse is None

    def nonempty(self) -> np.ndarray:
        return (self.counts > 0).astype(np.float64)[:, None]

    def members(self, row: int) -> np.ndarray:
        if self.sparse is not None:
            return self.sparse.indices[self.sparse.indptr[row]:self.sparse.indptr[row + 1]]
        e = self.exclude[row]
        return self.pool[self.pool != e] if e >= 0 else self.pool

    def dense(self) -> np.ndarray:
        """Explicit ``n_rows x n_src`` averaging matrix (test helper)."""
        if self.sparse is not None:
            return self.sparse.toarray()
        out = np.zeros((self.n_rows, self.n_src))
        for r in range(self.n_rows):
            m = self.members(r)
            if len(m):
                out[r, m] = 1.0 / len(m)
        return out

    def apply(self, rec: Record, x: Tensor) -> Tensor:
        if self.sparse is not None:
            return rec.spmm(self.sparse, x)
        in_pool = np.zeros(self.n_src, dtype=bool)
        in_pool[self.pool] = True
        if self._drop is None:
            hit = (self.exclude >= 0) & in_pool[np.maximum(self.exclude, 0)]
            self._drop = SparseConst(np.concatenate([[0], np.cumsum(hit)]), self.exclude[hit],
                                     np.ones(int(hit.sum())), (self.n_rows, self.n_src))
        total = rec.matmul(rec.const(in_pool.astype(np.float64)[None, :]), x)
        summed = rec.add(rec.scale(rec.spmm(self._drop, x), -1.0), total)
        inv = np.divide(1.0, self.counts, out=np.zeros(self.n_rows), where=self.counts > 0)
        return rec.hadamard(summed, rec.const(inv[:, None]))


def _exact_aggregator(pool, exclude, n_rows, n_src) -> Aggregator:
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    exclude = np.asarray(exclude, dtype=np.int64)
    in_pool = np.zeros(n_src, dtype=bool)
    in_pool[pool] = True
    hit = (exclude >= 0) & in_pool[np.maximum(exclude, 0)]
    counts = len(pool) - hit.astype(np.int64)
    return Aggregator(n_rows, n_src, counts, pool=pool, exclude=exclude)


def _sampled_aggregator(pool, exclude, n_rows, n_src, size, rng) -> Aggregator:
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    exclude = np.asarray(exclude, dtype=np.int64)
    pos = np.searchsorted(pool, exclude)
    hit = (exclude >= 0) & (pos < len(pool)) & (pool[np.minimum(pos, len(pool) - 1)] == exclude)
    avail = len(pool) - hit
    if (avail <= size).all():
        # every candidate set fits: the sample is the whole pool
        return _exact_aggregator(pool, exclude, n_rows, n_src)
    sets = []
    for r in range(n_rows):
        k = int(min(size, avail[r]))
        draw = rng.choice(int(avail[r]), size=k, replace=False)
        if hit[r]:
            draw = draw + (draw >= pos[r])
        sets.append(np.sort(pool[draw]))
    counts = np.array([len(s) for s in sets], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(sets) if sets else np.zeros(0, dtype=np.int64)
    data = np.repeat(np.divide(1.0, counts, out=np.zeros(n_rows), where=counts > 0), counts)
    return Aggregator(n_rows, n_src, counts, sparse=SparseConst(indptr, indices, data, (n_rows, n_src)))


@dataclass
class MatchingNeighborhood:
    """Per domain: head-user, tail-user and cross-domain aggregators."""

    head: tuple[Aggregator, Aggregator]
    tail: tuple[Aggregator, Aggregator]
    cdr: tuple[Aggregator, Aggregator]
    size: int | None


def sample_matching(heads: tuple[np.ndarray, np.ndarray],
                    counterparts: tuple[np.ndarray, np.ndarray],
                    size: int | None, seed: int, epoch: int = 0) -> MatchingNeighborhood:
    """Matching-neighbor sets for both domains.

    ``heads[d]`` is the head mask of domain ``d``; ``counterparts[d][u]`` is
    the overlapped partner of user ``u`` in the other domain (or -1).  With
    ``size=None`` the sets are the full fully connected neighborhoods; otherwise
    each is a uniform sample of at most ``size`` users drawn with a generator
    keyed on ``(seed, epoch)``.
    """
    if size is not None and size < 1:
        raise ValueError("matching sample size must be >= 1")
    head, tail, cdr = [], [], []
    for d in (0, 1):
        n = len(heads[d])
        n_other = len(heads[1 - d])
        self_ids = np.arange(n)
        jobs = [
            (head, np.flatnonzero(heads[d]), self_ids, n),
            (tail, np.flatnonzero(~heads[d]), self_ids, n),
            (cdr, np.arange(n_other), counterparts[d], n_other),
        ]
        for k, (out, pool, excl, n_src) in enumerate(jobs):
            if size is None:
                out.append(_exact_aggregator(pool, excl, n, n_src))
            else:
                rng = stream(seed, "matching", epoch, d, k)
                out.append(_sampled_aggregator(pool, excl, n, n_src, size, rng))
    return MatchingNeighborhood(tuple(head), tuple(tail), tuple(cdr), size)
