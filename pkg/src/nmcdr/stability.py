"""Perturbation stability of the compressed three-layer softplus model.

The compressed model on ``N`` nodes with features ``x`` (one row per node):

    h1_i = softplus(W_a1 x_i + (1/n_i) W_n1 sum_{j in N_i} x_j + b1)
    h2_i = softplus(W_a2 h1_i + 1/(N-1) W_n2 sum_{k != i} h1_k + b2)
    z_uv = softmax(W_a3 [h2_u ; h2_v] + b3)

Perturbing ``x_u`` moves ``z_uv`` by at most ``gamma_hat * |delta|`` with

    gamma_hat = C_sf C_sp^2 |W_a3| (|W_a2| |W_a1| + (sum_{j in N_u} 1/n_j)/(N-1) |W_n2| |W_n1|)

when the movement of ``h2_v`` is neglected.  The empirical check therefore
pairs ``u`` with a node ``v`` outside ``N_u`` whenever one exists.  Matrices
use the column convention here (``W @ x``); spectral norms are unaffected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .seeding import stream


def op_norm(w: np.ndarray, iters: int = 100, tol: float = 1e-10) -> float:
    """Spectral norm by power iteration on ``W^T W``."""
    w = np.asarray(w, dtype=np.float64)
    if not w.size or not np.any(w):
        return 0.0
    v = np.random.default_rng(0).normal(size=w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        wv = w @ v
        new = float(np.linalg.norm(wv))
        if new == 0.0:
            return 0.0
        v = w.T @ wv
        v /= np.linalg.norm(v)
        if abs(new - sigma) <= tol * max(new, 1.0):
            sigma = new
            break
        sigma = new
    return float(max(sigma, np.linalg.norm(w @ v)))


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


@dataclass
class CompressedModel:
    W_a1: np.ndarray
    W_n1: np.ndarray
    b1: np.ndarray
    W_a2: np.ndarray
    W_n2: np.ndarray
    b2: np.ndarray
    W_a3: np.ndarray
    b3: np.ndarray
    neighbors: list[np.ndarray]

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def mean_matrix(self) -> np.ndarray:
        """Row ``i`` averages the neighbors of node ``i``."""
        if getattr(self, "_mean", None) is None:
            a = np.zeros((self.n_nodes, self.n_nodes))
            for i, nb in enumerate(self.neighbors):
                if len(nb):
                    a[i, nb] = 1.0 / len(nb)
            self._mean = a
        return self._mean

    def hidden(self, x: np.ndarray) -> np.ndarray:
        n = self.n_nodes
        agg = self.mean_matrix() @ x
        h1 = softplus(x @ self.W_a1.T + agg @ self.W_n1.T + self.b1)
        others = (h1.sum(axis=0)[None, :] - h1) / (n - 1)
        return softplus(h1 @ self.W_a2.T + others @ self.W_n2.T + self.b2)

    def output(self, x: np.ndarray, u: int, v: int) -> np.ndarray:
        h2 = self.hidden(x)
        return softmax(self.W_a3 @ np.concatenate([h2[u], h2[v]]) + self.b3)

    def gamma_hat(self, u: int, c_sf: float = 1.0, c_sp: float = 1.0) -> float:
        n = self.n_nodes
        if n < 2:
            raise ValueError("the stability bound needs at least 2 nodes")
        inv = sum(1.0 / len(self.neighbors[j]) for j in self.neighbors[u])
        return c_sf * c_sp ** 2 * op_norm(self.W_a3) * (
            op_norm(self.W_a2) * op_norm(self.W_a1)
            + inv / (n - 1) * op_norm(self.W_n2) * op_norm(self.W_n1))


def random_graph(n: int, p: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Symmetric random graph plus a ring, so every node has a neighbor."""
    adj = np.triu(rng.uniform(size=(n, n)) < p, 1)
    adj = adj | adj.T
    for i in range(n):
        adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = True
    np.fill_diagonal(adj, False)
    return [np.flatnonzero(adj[i]) for i in range(n)]


def random_model(rng: np.random.Generator, n_nodes: int = 10, in_dim: int = 8, hidden: int = 8,
                 out_dim: int = 2, edge_prob: float = 0.3, scale: float = 1.0) -> CompressedModel:
    def w(o, i):
        return rng.normal(0.0, scale / np.sqrt(i), size=(o, i))
    return CompressedModel(
        w(hidden, in_dim), w(hidden, in_dim), rng.normal(0, 0.1, hidden),
        w(hidden, hidden), w(hidden, hidden), rng.normal(0, 0.1, hidden),
        w(out_dim, 2 * hidden), rng.normal(0, 0.1, out_dim),
        random_graph(n_nodes, edge_prob, rng))


def compress(params: dict[str, np.ndarray], dom: str = "Z", n_nodes: int = 10,
             edge_prob: float = 0.3, rng: np.random.Generator | None = None) -> CompressedModel:
    """Compressed model from trained weights.

    Layer one is the encoder (``W_hge`` on both the self and neighbor paths),
    layer two the head-user matching channel with the identity as its self
    path (the residual connection), and layer three the first layer of the
    prediction MLP.  Row-convention weights are transposed.
    """
    rng = rng or np.random.default_rng(0)
    w_hge = params[f"{dom}.W_hge"].T
    d = w_hge.shape[0]
    w0 = params[f"{dom}.mlp.W0"].T
    return CompressedModel(w_hge, w_hge, params[f"{dom}.b_hge"].ravel(),
                           np.eye(d), params[f"{dom}.W_head"].T, params[f"{dom}.b_head"].ravel(),
                           w0, params[f"{dom}.mlp.b0"].ravel(), random_graph(n_nodes, edge_prob, rng))


@dataclass
class StabilityDiagnostic:
    gamma_hat: float
    empirical_ratio: float
    trials: int
    within_bound: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def stability_check(model: CompressedModel, trials: int = 1000, scale: float = 1e-2,
                    seed: int = 0, u: int = 0, c_sf: float = 1.0, c_sp: float = 1.0,
                    slack: float = 1e-9) -> StabilityDiagnostic:
    """Max over random perturbations of |z_uv - z'_uv| / |x_u - x'_u| versus gamma_hat."""
    n = model.n_nodes
    if n < 2:
        raise ValueError("the stability check needs at least 2 nodes")
    rng = stream(seed, "stability")
    far = [j for j in range(n) if j != u and j not in set(model.neighbors[u].tolist())]
    v = far[0] if far else (u + 1) % n
    gamma = model.gamma_hat(u, c_sf, c_sp)
    in_dim = model.W_a1.shape[1]
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(n, in_dim))
        delta = rng.normal(size=in_dim) * scale * rng.uniform(0.01, 100.0)
        xp = x.copy()
        xp[u] += delta
        num = np.linalg.norm(model.output(x, u, v) - model.output(xp, u, v))
        worst = max(worst, float(num / np.linalg.norm(delta)))
    return StabilityDiagnostic(gamma, worst, trials, worst <= gamma + slack,
                               {"u": u, "v": v, "n_nodes": n, "C_sf": c_sf, "C_sp": c_sp,
                                "perturbation_scale": scale})
