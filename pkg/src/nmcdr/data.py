"""Interaction logs for two domains: ingest, overlap, density variants, splits, negatives."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream

log = logging.getLogger(__name__)

FORMATS = ("tsv-ratings", "csv-ratings")
DOMAIN_NAMES = ("Z", "Zbar")
NEGATIVE_MODES = ("train", "eval", "val")


class IngestError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    rating: float | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")


@dataclass
class DomainIndex:
    """One indexed domain. Edges are sorted by (user, timestamp, item).

    Users and items get dense ids in sorted-key order, so re-loading the same
    input always reproduces the same ids.  ``edge_time`` is -1 where the
    timestamp was absent (``edge_has_time`` False).
    """

    name: str
    user_keys: list[str]
    item_keys: list[str]
    edge_user: np.ndarray
    edge_item: np.ndarray
    edge_time: np.ndarray
    edge_has_time: np.ndarray
    user_indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.bincount(self.edge_user, minlength=self.n_users)
        self.user_indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.user_map = {k: i for i, k in enumerate(self.user_keys)}
        self.item_map = {k: i for i, k in enumerate(self.item_keys)}

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def n_ratings(self) -> int:
        return len(self.edge_user)

    @property
    def density(self) -> float:
        return self.n_ratings / (self.n_users * self.n_items) if self.n_users and self.n_items else 0.0

    def degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def user_items(self, u: int) -> np.ndarray:
        return self.edge_item[self.user_indptr[u]:self.user_indptr[u + 1]]

    def statistics(self) -> dict:
        return {"users": self.n_users, "items": self.n_items, "ratings": self.n_ratings,
                "density": self.density}

    @classmethod
    def from_edges(cls, name, user_keys_e, item_keys_e, times, has_time,
                   item_keys: list[str] | None = None) -> DomainIndex:
        """Index raw keyed edges. ``item_keys`` pins the item catalog when given."""
        users = sorted(set(user_keys_e))
        if item_keys is None:
            item_keys = sorted(set(item_keys_e))
        umap = {k: i for i, k in enumerate(users)}
        imap = {k: i for i, k in enumerate(item_keys)}
        eu = np.fromiter((umap[k] for k in user_keys_e), dtype=np.int64, count=len(user_keys_e))
        ei = np.fromiter((imap[k] for k in item_keys_e), dtype=np.int64, count=len(item_keys_e))
        et = np.asarray(times, dtype=np.int64)
        eh = np.asarray(has_time, dtype=bool)
        order = np.lexsort((ei, et, eu))
        return cls(name, users, list(item_keys), eu[order], ei[order], et[order], eh[order])

    @classmethod
    def from_interactions(cls, interactions, min_interactions: int = 5,
                          name: str = "Z") -> DomainIndex:
        # implicit feedback: duplicates collapse to one edge, keeping the latest timestamp
        latest: dict[tuple[str, str], int | None] = {}
        for r in interactions:
            key = (r.user_key, r.item_key)
            if key not in latest:
                latest[key] = r.timestamp
            elif r.timestamp is not None and (latest[key] is None or r.timestamp > latest[key]):
                latest[key] = r.timestamp
        per_user: dict[str, int] = {}
        for u, _ in latest:
            per_user[u] = per_user.get(u, 0) + 1
        kept = [(u, i, t) for (u, i), t in latest.items() if per_user[u] >= min_interactions]
        if not kept:
            raise IngestError(f"domain {name!r}: no users with >= {min_interactions} interactions")
        return cls.from_edges(
            name,
            [k[0] for k in kept],
            [k[1] for k in kept],
            [-1 if k[2] is None else k[2] for k in kept],
            [k[2] is not None for k in kept],
        )

    def subset(self, edge_mask: np.ndarray, min_interactions: int) -> DomainIndex:
        """Keep masked edges, drop users left with too few; item catalog unchanged."""
        eu = self.edge_user[edge_mask]
        counts = np.bincount(eu, minlength=self.n_users)
        keep = edge_mask.copy()
        keep[edge_mask] = counts[eu] >= min_interactions
        uk = [self.user_keys[u] for u in self.edge_user[keep]]
        ik = [self.item_keys[i] for i in self.edge_item[keep]]
        return DomainIndex.from_edges(self.name, uk, ik, self.edge_time[keep],
                                      self.edge_has_time[keep], item_keys=self.item_keys)


def _parse_row(fields: list[str], where: str) -> RawInteraction:
    if len(fields) < 2 or len(fields) > 4:
        raise IngestError(f"{where}: expected 2-4 fields, got {len(fields)}")
    user, item = fields[0].strip(), fields[1].strip()
    if not user or not item:
        raise IngestError(f"{where}: empty user or item key")
    rating = timestamp = None
    try:
        if len(fields) > 2 and fields[2].strip():
            rating = float(fields[2])
        if len(fields) > 3 and fields[3].strip():
            timestamp = int(float(fields[3]))
    except ValueError as exc:
        raise IngestError(f"{where}: {exc}") from None
    return RawInteraction(user, item, rating, timestamp)


def read_interactions(path, fmt: str) -> list[RawInteraction]:
    if fmt not in FORMATS:
        raise IngestError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    out = []
    with path.open(encoding="utf-8", newline="") as fh:
        if fmt == "tsv-ratings":
            rows = (line.rstrip("\r\n").split("\t") for line in fh)
        else:
            rows = csv.reader(fh)
        for lineno, fields in enumerate(rows, start=1):
            if not fields or (len(fields) == 1 and not fields[0].strip()):
                continue
            if fields[0].startswith("#"):
                continue
            out.append(_parse_row(fields, f"{path}:{lineno}"))
    return out


def ingest(path, fmt: str = "tsv-ratings", min_interactions: int = 5,
           name: str = "Z") -> DomainIndex:
    """Parse, filter and index one domain's interaction file."""
    index = DomainIndex.from_interactions(read_interactions(path, fmt), min_interactions, name)
    log.info("ingested %s: %s", path, index.statistics())
    return index


@dataclass
class CrossDomainDataset:
    domains: tuple[DomainIndex, DomainIndex]
    overlap: np.ndarray  # (k, 2): user id in Z, user id in Zbar
    k_u: float = 1.0
    d_s: float = 1.0
    intersection_size: int = 0

    def counterpart(self, domain: int) -> np.ndarray:
        """Per-user id of the overlapped counterpart in the other domain, -1 if none."""
        out = np.full(self.domains[domain].n_users, -1, dtype=np.int64)
        if len(self.overlap):
            out[self.overlap[:, domain]] = self.overlap[:, 1 - domain]
        return out

    def statistics(self) -> dict:
        stats = {}
        for name, dom in zip(DOMAIN_NAMES, self.domains):
            stats[name] = {**dom.statistics(), "overlap": int(len(self.overlap))}
        stats["K_u"] = self.k_u
        stats["D_s"] = self.d_s
        stats["intersection"] = self.intersection_size
        return stats


def build_cross(dz: DomainIndex, dzb: DomainIndex, k_u: float, seed: int) -> CrossDomainDataset:
    """Expose a uniform random ``round(k_u * |intersection|)`` subset as overlapped pairs.

    The subset is a prefix of one seeded permutation, so larger ``k_u`` gives a
    superset of the pairs chosen for smaller ``k_u``.
    """
    if not 0.0 <= k_u <= 1.0:
        raise ValueError(f"K_u must lie in [0, 1], got {k_u}")
    common = sorted(set(dz.user_keys) & set(dzb.user_keys))
    if not common and k_u > 0:
        warnings.warn("the two domains share no user keys; overlap set is empty", stacklevel=2)
    n = round_half_up(k_u * len(common))
    perm = stream(seed, "overlap").permutation(len(common))
    chosen = [common[j] for j in np.sort(perm[:n])]
    pairs = np.array([[dz.user_map[k], dzb.user_map[k]] for k in chosen], dtype=np.int64).reshape(-1, 2)
    return CrossDomainDataset((dz, dzb), pairs, k_u=k_u, intersection_size=len(common))


def apply_density(ds: CrossDomainDataset, d_s: float, seed: int,
                  min_interactions: int = 3) -> CrossDomainDataset:
    """Keep a nested random ``round(d_s * |E|)`` subset of each domain's edges."""
    if not 0.0 < d_s <= 1.0:
        raise ValueError(f"D_s must lie in (0, 1], got {d_s}")
    if d_s == 1.0:
        return CrossDomainDataset(ds.domains, ds.overlap.copy(), ds.k_u, 1.0, ds.intersection_size)
    new = []
    for d, dom in enumerate(ds.domains):
        perm = stream(seed, "density", d).permutation(dom.n_ratings)
        mask = np.zeros(dom.n_ratings, dtype=bool)
        mask[perm[:round_half_up(d_s * dom.n_ratings)]] = True
        new.append(dom.subset(mask, min_interactions))
    pairs = []
    for a, b in ds.overlap:
        ka, kb = ds.domains[0].user_keys[a], ds.domains[1].user_keys[b]
        if ka in new[0].user_map and kb in new[1].user_map:
            pairs.append((new[0].user_map[ka], new[1].user_map[kb]))
    overlap = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return CrossDomainDataset((new[0], new[1]), overlap, ds.k_u, d_s, ds.intersection_size)


@dataclass
class DomainSplit:
    test_item: np.ndarray  # per user, -1 when the user is excluded
    val_item: np.ndarray  # per user, -1 when not in validation mode
    train_user: np.ndarray
    train_item: np.ndarray
    excluded: int = 0

    def test_users(self) -> np.ndarray:
        return np.flatnonzero(self.test_item >= 0)

    def val_users(self) -> np.ndarray:
        return np.flatnonzero(self.val_item >= 0)


@dataclass
class SplitSpec:
    domains: tuple[DomainSplit, DomainSplit]


def _split_domain(dom: DomainIndex, rng, validation: bool, min_interactions: int) -> DomainSplit:
    n = dom.n_users
    test = np.full(n, -1, dtype=np.int64)
    val = np.full(n, -1, dtype=np.int64)
    held = np.zeros(dom.n_ratings, dtype=bool)
    excluded = 0
    for u in range(n):
        lo, hi = dom.user_indptr[u], dom.user_indptr[u + 1]
        if hi - lo < min_interactions:
            excluded += 1
            continue
        if dom.edge_has_time[lo:hi].all():
            # edges are sorted by (time, item): last is newest, highest item id on ties
            order = np.arange(lo, hi)
        else:
            order = lo + rng.permutation(hi - lo)
        test[u] = dom.edge_item[order[-1]]
        held[order[-1]] = True
        if validation and hi - lo >= 3:
            val[u] = dom.edge_item[order[-2]]
            held[order[-2]] = True
    if excluded:
        log.warning("domain %s: %d users below %d interactions excluded from the split",
                    dom.name, excluded, min_interactions)
    return DomainSplit(test, val, dom.edge_user[~held], dom.edge_item[~held], excluded)


def split(ds: CrossDomainDataset, seed: int, validation: bool = False,
          min_interactions: int = 3) -> SplitSpec:
    """Leave-one-out: newest interaction is the test item (random if timestamps are absent)."""
    return SplitSpec(tuple(
        _split_domain(dom, stream(seed, "split", d), validation, min_interactions)
        for d, dom in enumerate(ds.domains)))


def sample_negatives(dom: DomainIndex, user: int, n: int, seed: int,
                     mode: str = "eval") -> np.ndarray:
    """``n`` distinct items the user never interacted with, uniform and reproducible.

    Drawing ``n + |interacted|`` distinct items and dropping the interacted
    ones leaves at least ``n`` survivors whose first ``n`` are a uniform
    ``n``-subset of the eligible items.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in NEGATIVE_MODES:
        raise ValueError(f"mode must be one of {NEGATIVE_MODES}, got {mode!r}")
    seen = np.unique(dom.user_items(user))
    if dom.n_items - len(seen) < n:
        raise ValueError(f"domain {dom.name!r} has only {dom.n_items - len(seen)} "
                         f"eligible items for user {user}, need {n}")
    rng = stream(seed, mode, hash_domain(dom.name), user)
    draw = rng.choice(dom.n_items, size=min(dom.n_items, n + len(seen)), replace=False)
    return draw[~np.isin(draw, seen)][:n]


def hash_domain(name: str) -> int:
    return DOMAIN_NAMES.index(name) if name in DOMAIN_NAMES else sum(name.encode())


class NegativeSampler:
    """Vectorised rejection sampler of training negatives for one domain."""

    def __init__(self, dom: DomainIndex):
        self.n_items = dom.n_items
        self.keys = np.unique(dom.edge_user * dom.n_items + dom.edge_item)
        if (dom.degrees() >= dom.n_items).any():
            raise ValueError(f"domain {dom.name!r}: a user has interacted with every item")

    def _seen(self, users, items):
        k = users * self.n_items + items
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == k

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        items = rng.integers(0, self.n_items, size=len(users))
        bad = self._seen(users, items)
        while bad.any():
            items[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad[bad] = self._seen(users[bad], items[bad])
        return items


# -- prepared-dataset serialisation ------------------------------------------------

_SPLIT_FIELDS = ("test_item", "val_item", "train_user", "train_item")


def to_arrays(ds: CrossDomainDataset, sp: SplitSpec) -> tuple[dict[str, np.ndarray], dict]:
    """Numeric arrays plus a JSON-ready dict (keys, scalars) that rebuild ``(ds, sp)``."""
    arrays: dict[str, np.ndarray] = {"overlap": ds.overlap.astype(np.int64)}
    meta: dict = {"k_u": ds.k_u, "d_s": ds.d_s, "intersection": ds.intersection_size, "domains": []}
    for name, dom, s in zip(DOMAIN_NAMES, ds.domains, sp.domains):
        arrays[f"{name}.edge_user"] = dom.edge_user
        arrays[f"{name}.edge_item"] = dom.edge_item
        arrays[f"{name}.edge_time"] = dom.edge_time
        arrays[f"{name}.edge_has_time"] = dom.edge_has_time.astype(np.int8)
        for f in _SPLIT_FIELDS:
            arrays[f"{name}.split.{f}"] = getattr(s, f).astype(np.int64)
        meta["domains"].append({"name": dom.name, "user_keys": dom.user_keys, "item_keys": dom.item_keys,
                                "excluded": int(s.excluded)})
    return arrays, meta


def from_arrays(arrays, meta: dict) -> tuple[CrossDomainDataset, SplitSpec]:
    doms, splits = [], []
    for name, m in zip(DOMAIN_NAMES, meta["domains"]):
        doms.append(DomainIndex(m["name"], list(m["user_keys"]), list(m["item_keys"]),
                                np.asarray(arrays[f"{name}.edge_user"], dtype=np.int64),
                                np.asarray(arrays[f"{name}.edge_item"], dtype=np.int64),
                                np.asarray(arrays[f"{name}.edge_time"], dtype=np.int64),
                                np.asarray(arrays[f"{name}.edge_has_time"]).astype(bool)))
        splits.append(DomainSplit(*(np.asarray(arrays[f"{name}.split.{f}"], dtype=np.int64)
                                    for f in _SPLIT_FIELDS), m["excluded"]))
    ds = CrossDomainDataset((doms[0], doms[1]), np.asarray(arrays["overlap"], dtype=np.int64).reshape(-1, 2),
                            meta["k_u"], meta["d_s"], meta["intersection"])
    return ds, SplitSpec((splits[0], splits[1]))
