"""Desk-scale synthetic two-domain interaction logs with known latent structure.

Users and items get Gaussian latent factors of rank ``rank``.  Domain Zbar's
item factors are domain Z's rotated by a fixed orthogonal map ``R``, and every
overlapped user's Zbar factor is their Z factor times ``R``, so an overlapped
user has identical affinities in both domains.  Per-user degrees follow a
Pareto-like law ``d_min * (1 - U) ** -tail_exponent`` (capped), and each user
interacts with their top-``d`` items by affinity plus Gumbel noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io_utils import atomic_write_bytes, atomic_write_text, dump_json, npz_bytes
from .seeding import stream


@dataclass
class SyntheticSpec:
    users: int = 1000
    items: int = 500
    rank: int = 4
    overlap: float = 0.5
    tail_exponent: float = 0.5
    noise: float = 0.5
    seed: int = 0
    min_degree: int = 5
    max_degree: int | None = None

    def validate(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap fraction must lie in [0, 1]")
        if self.users < 1 or self.items < 1:
            raise ValueError("users and items must be positive")
        if self.tail_exponent < 0 or self.noise < 0:
            raise ValueError("tail_exponent and noise must be >= 0")
        cap = self.degree_cap()
        if self.min_degree < 1 or self.min_degree > cap:
            raise ValueError(f"infeasible degrees: min_degree={self.min_degree} but at most "
                             f"{cap} items per user are available")

    def degree_cap(self) -> int:
        # keep enough unseen items for 199 evaluation negatives when the catalog allows
        room = self.items - 200 if self.items > 400 else self.items // 2
        cap = max(room, 1)
        return min(cap, self.max_degree) if self.max_degree else cap


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    user_keys: tuple[list[str], list[str]]
    item_keys: tuple[list[str], list[str]]
    user_factors: tuple[np.ndarray, np.ndarray]
    item_factors: tuple[np.ndarray, np.ndarray]
    rotation: np.ndarray
    edges: tuple[list[tuple[int, int, int]], list[tuple[int, int, int]]]  # (user, item, time)

    def affinity(self, d: int) -> np.ndarray:
        return self.user_factors[d] @ self.item_factors[d].T / np.sqrt(self.spec.rank)


def _orthogonal(rng, r):
    q, t = np.linalg.qr(rng.normal(size=(r, r)))
    return q * np.sign(np.diag(t))


def generate(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = stream(spec.seed, "synth")
    r, n, m = spec.rank, spec.users, spec.items
    rot = _orthogonal(rng, r)
    xz = rng.normal(size=(n, r))
    yz = rng.normal(size=(m, r))
    n_shared = int(np.floor(spec.overlap * n + 0.5))
    shared = np.sort(rng.choice(n, size=n_shared, replace=False))
    xzb = rng.normal(size=(n, r))
    xzb[:n_shared] = xz[shared] @ rot
    yzb = yz @ rot
    keys_z = [f"u{j:06d}" for j in range(n)]
    keys_zb = [keys_z[j] for j in shared] + [f"w{j:06d}" for j in range(n - n_shared)]
    cap = spec.degree_cap()
    edges = []
    for d, x, y in ((0, xz, yz), (1, xzb, yzb)):
        deg = spec.min_degree * (1.0 - rng.uniform(size=n)) ** (-spec.tail_exponent)
        deg = np.minimum(np.floor(deg).astype(np.int64), cap)
        score = x @ y.T / np.sqrt(r) + spec.noise * rng.gumbel(size=(n, m))
        out = []
        for u in range(n):
            top = np.argpartition(-score[u], deg[u] - 1)[:deg[u]]
            times = rng.permutation(deg[u]) + 1
            out.extend((u, int(i), int(t)) for i, t in zip(np.sort(top), times))
        edges.append(out)
    items = [f"i{j:05d}" for j in range(m)]
    return SyntheticData(spec, (keys_z, keys_zb), (items, list(items)), (xz, xzb), (yz, yzb),
                         rot, (edges[0], edges[1]))


def write(data: SyntheticData, out_dir) -> dict[str, Path]:
    """Two tsv-ratings files, ``truth.npz`` with the factors and ``synth.json``."""
    out = Path(out_dir)
    paths = {}
    for d, name in enumerate(("Z", "Zbar")):
        lines = ["# user\titem\trating\ttimestamp"]
        for u, i, t in data.edges[d]:
            lines.append(f"{data.user_keys[d][u]}\t{data.item_keys[d][i]}\t1\t{t}")
        paths[name] = out / f"{name}.tsv"
        atomic_write_text(paths[name], "\n".join(lines) + "\n")
    paths["truth"] = out / "truth.npz"
    atomic_write_bytes(paths["truth"], npz_bytes({
        "user_Z": data.user_factors[0], "user_Zbar": data.user_factors[1],
        "item_Z": data.item_factors[0], "item_Zbar": data.item_factors[1],
        "rotation": data.rotation}))
    paths["spec"] = out / "synth.json"
    atomic_write_text(paths["spec"], dump_json(asdict(data.spec)))
    return paths
