"""NMCDR forward computation over whole domains, plus a matrix-factorisation baseline.

Every stage works on the full user table of a domain at once: ``encode``
produces u_g1 for all users, ``intra_match`` u_g2, ``inter_match`` u_g3 and
``complement`` u_g4.  Row-vector convention throughout (``x @ W``).
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Aggregator, InteractionGraph, MatchingNeighborhood
from .io_utils import atomic_write_bytes
from .numerics import Record, SparseConst, Tensor

DOMAINS = ("Z", "Zbar")
STAGES = ("g0", "g1", "g2", "g3", "final")


@dataclass
class ModelConfig:
    dim: int = 128
    d_hge: int = 128
    d_igm: int = 128
    d_cgm: int = 128
    d_ref: int = 128
    mlp_hidden: tuple[int, ...] = (128, 64)
    emb_std: float = 0.01
    w_cross_init: float = 0.5

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        dims = (self.dim, self.d_hge, self.d_igm, self.d_cgm, self.d_ref)
        if len(set(dims)) != 1:
            # residual adds (u_g2 = u' + u_g1, ...) and u_g3 . v^T need one common width
            raise ValueError(f"dim, d_hge, d_igm, d_cgm and d_ref must be equal, got {dims}")
        if self.dim < 1 or any(h < 1 for h in self.mlp_hidden):
            raise ValueError("dimensions must be positive")


@dataclass
class AblationFlags:
    use_intra_matching: bool = True
    use_inter_matching: bool = True
    use_complementing: bool = True
    use_companion_losses: bool = True

    @classmethod
    def variant(cls, name: str) -> AblationFlags:
        """Flags for 'full', 'w/o-Igm', 'w/o-Cgm', 'w/o-Inc' or 'w/o-Sup'."""
        table = {
            "full": {},
            "w/o-Igm": {"use_intra_matching": False},
            "w/o-Cgm": {"use_inter_matching": False},
            "w/o-Inc": {"use_complementing": False},
            "w/o-Sup": {"use_companion_losses": False},
        }
        if name not in table:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(table)}")
        return cls(**table[name])


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


DOMAIN_WEIGHTS = ("W_hge", "W_head", "W_tail", "W_h", "W_t", "W_self", "W_other",
                  "W_s", "W_o", "W_ref")
DOMAIN_BIASES = ("b_hge", "b_head", "b_tail", "b_h", "b_t", "b_self", "b_other",
                 "b_s", "b_o", "b_ref")


def init_params(cfg: ModelConfig, n_users: tuple[int, int], n_items: tuple[int, int],
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Embeddings ~ N(0, emb_std), Xavier-uniform weights, zero biases, W_cross = c * I."""
    d = cfg.dim
    p: dict[str, np.ndarray] = {}
    for k, dom in enumerate(DOMAINS):
        p[f"{dom}.U"] = rng.normal(0.0, cfg.emb_std, size=(n_users[k], d))
        p[f"{dom}.V"] = rng.normal(0.0, cfg.emb_std, size=(n_items[k], d))
        for w in DOMAIN_WEIGHTS:
            p[f"{dom}.{w}"] = _xavier(rng, d, d)
        for b in DOMAIN_BIASES:
            p[f"{dom}.{b}"] = np.zeros((1, d))
        p[f"{dom}.W_cross"] = cfg.w_cross_init * np.eye(d)
        widths = (2 * d, *cfg.mlp_hidden, 1)
        for j in range(len(widths) - 1):
            p[f"{dom}.mlp.W{j}"] = _xavier(rng, widths[j], widths[j + 1])
            p[f"{dom}.mlp.b{j}"] = np.zeros((1, widths[j + 1]))
    return p


@dataclass
class GraphContext:
    """Structure the forward pass needs besides parameters."""

    graphs: tuple[InteractionGraph, InteractionGraph]
    counterparts: tuple[np.ndarray, np.ndarray]
    matching: MatchingNeighborhood
    _cache: dict = field(default_factory=dict, repr=False)

    def mean_items(self, d: int) -> SparseConst:
        key = ("mean_items", d)
        if key not in self._cache:
            self._cache[key] = self.graphs[d].mean_items()
        return self._cache[key]

    def counterpart_select(self, d: int) -> SparseConst:
        """0/1 matrix picking each overlapped user's partner row in the other domain."""
        key = ("select", d)
        if key not in self._cache:
            cp = self.counterparts[d]
            has = cp >= 0
            n_other = self.graphs[1 - d].n_users
            self._cache[key] = SparseConst(np.concatenate([[0], np.cumsum(has)]), cp[has],
                                           np.ones(int(has.sum())), (len(cp), n_other))
        return self._cache[key]

    def with_matching(self, matching: MatchingNeighborhood) -> GraphContext:
        return GraphContext(self.graphs, self.counterparts, matching, self._cache)


class Params(dict):
    """Parameter tensors of one record, looked up as ``P["Z", "W_hge"]``."""

    def __getitem__(self, key):
        if isinstance(key, tuple):
            key = ".".join(key)
        return super().__getitem__(key)


def register(rec: Record, params: dict[str, np.ndarray]) -> Params:
    return Params({name: rec.param(name, arr) for name, arr in params.items()})


def _masked_bias(rec: Record, mask: np.ndarray, b: Tensor) -> Tensor:
    # (rows x 1) 0/1 column times (1 x d) bias
    return rec.matmul(rec.const(mask), b)


# -- stages ----------------------------------------------------------------------

def encode(rec: Record, P: Params, dom: str, mean_items: SparseConst) -> Tensor:
    """u_g1 = ReLU(u W_hge + sum_v (1/|N_u|)(v W_hge + b_hge))."""
    agg = rec.spmm(mean_items, P[dom, "V"])
    self_msg = rec.matmul(P[dom, "U"], P[dom, "W_hge"])
    nbr_msg = rec.add(rec.matmul(agg, P[dom, "W_hge"]), P[dom, "b_hge"])
    return rec.relu(rec.add(self_msg, nbr_msg))


def _channel(rec: Record, agg: Aggregator, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """ReLU of the mean message over ``agg``'s sets; zero for empty sets."""
    return rec.relu(rec.add(rec.matmul(agg.apply(rec, x), w), _masked_bias(rec, agg.nonempty(), b)))


def _gate(rec: Record, a: Tensor, b: Tensor, wa, ba, wb, bb) -> Tensor:
    """tanh((1 - H) * a + H * b) with H = sigmoid(a Wa + ba + b Wb + bb)."""
    h = rec.sigmoid(rec.add(rec.add(rec.matmul(a, wa), ba), rec.add(rec.matmul(b, wb), bb)))
    return rec.tanh(rec.add(a, rec.hadamard(h, rec.sub(b, a))))


def intra_match(rec: Record, P: Params, dom: str, g1: Tensor,
                head: Aggregator, tail: Aggregator) -> Tensor:
    u_head = _channel(rec, head, g1, P[dom, "W_head"], P[dom, "b_head"])
    u_tail = _channel(rec, tail, g1, P[dom, "W_tail"], P[dom, "b_tail"])
    fused = _gate(rec, u_head, u_tail, P[dom, "W_h"], P[dom, "b_h"], P[dom, "W_t"], P[dom, "b_t"])
    return rec.add(fused, g1)


def inter_match(rec: Record, P: Params, dom: str, other: str, g2: Tensor, g2_other: Tensor,
                select: SparseConst, cdr: Aggregator) -> Tensor:
    """Cross-domain matching for every user of ``dom``.

    Non-overlapped users (empty rows of ``select``) get a zero self message.
    """
    has_self = (np.diff(select.indptr) > 0).astype(np.float64)[:, None]
    m_self = rec.spmm(select, g2_other)
    u_self = rec.relu(rec.add(rec.matmul(m_self, P[dom, "W_self"]),
                              _masked_bias(rec, has_self, P[dom, "b_self"])))
    u_other = _channel(rec, cdr, g2_other, P[dom, "W_other"], P[dom, "b_other"])
    eye = rec.const(np.eye(P[other, "W_cross"].rows))
    keep_other = rec.sub(eye, P[other, "W_cross"])
    g3_star = rec.add(rec.matmul(g2, P[dom, "W_cross"]), rec.matmul(u_self, keep_other))
    fused = _gate(rec, g3_star, u_other, P[dom, "W_s"], P[dom, "b_s"], P[dom, "W_o"], P[dom, "b_o"])
    return rec.add(fused, g2)


def link_strengths(rec: Record, P: Params, dom: str, g3: Tensor,
                   graph: InteractionGraph) -> tuple[Tensor, Tensor]:
    """Per train edge: softmax over the user's neighbors of u_g3 . v; also the gathered v rows."""
    v_e = rec.gather(P[dom, "V"], graph.user_items)
    scores = rec.reduce_sum(rec.hadamard(rec.gather(g3, graph.edge_users()), v_e), axis=1)
    return rec.segment_softmax(scores, graph.user_indptr), v_e


def complement(rec: Record, P: Params, dom: str, g3: Tensor, graph: InteractionGraph) -> Tensor:
    """u_g4 = u_g3 + sum_v alpha_uv v W_ref + b_ref."""
    alpha, v_e = link_strengths(rec, P, dom, g3, graph)
    agg = rec.scatter_add(rec.hadamard(v_e, alpha), graph.edge_users(), graph.n_users)
    return rec.add(g3, rec.add(rec.matmul(agg, P[dom, "W_ref"]), P[dom, "b_ref"]))


def predict_logits(rec: Record, P: Params, dom: str, users: Tensor, items: Tensor) -> Tensor:
    """Pre-sigmoid output of the domain's shared prediction MLP on [u || v]."""
    h = rec.concat_cols([users, items])
    j = 0
    while f"{dom}.mlp.W{j + 1}" in P:
        h = rec.relu(rec.linear(h, P[dom, f"mlp.W{j}"], P[dom, f"mlp.b{j}"]))
        j += 1
    return rec.linear(h, P[dom, f"mlp.W{j}"], P[dom, f"mlp.b{j}"])


def represent(rec: Record, P: Params, ctx: GraphContext, flags: AblationFlags) -> list[dict[str, Tensor]]:
    """Stage representations for all users of both domains.

    Returns per domain a dict with keys among ``g0..g3`` (companion inputs
    that exist under ``flags``) and ``final``.  A disabled stage passes its
    input through and contributes no companion head.
    """
    reps = [{} for _ in DOMAINS]
    g2s = []
    for d, dom in enumerate(DOMAINS):
        g1 = encode(rec, P, dom, ctx.mean_items(d))
        reps[d].update(g0=P[dom, "U"], g1=g1)
        g2 = g1
        if flags.use_intra_matching:
            g2 = intra_match(rec, P, dom, g1, ctx.matching.head[d], ctx.matching.tail[d])
            reps[d]["g2"] = g2
        g2s.append(g2)
    g3s = list(g2s)
    if flags.use_inter_matching:
        for d, dom in enumerate(DOMAINS):
            g3s[d] = inter_match(rec, P, dom, DOMAINS[1 - d], g2s[d], g2s[1 - d],
                                 ctx.counterpart_select(d), ctx.matching.cdr[d])
            reps[d]["g3"] = g3s[d]
    for d, dom in enumerate(DOMAINS):
        reps[d]["final"] = complement(rec, P, dom, g3s[d], ctx.graphs[d]) if flags.use_complementing else g3s[d]
    return reps


def forward_all(rec: Record, P: Params, ctx: GraphContext, flags: AblationFlags,
                batches: list[tuple[np.ndarray, np.ndarray]]) -> list[dict[str, Tensor]]:
    """Logits of every head for the ``(users, items)`` pairs of each domain."""
    reps = represent(rec, P, ctx, flags)
    out = []
    for d, dom in enumerate(DOMAINS):
        users, items = batches[d]
        v = rec.gather(P[dom, "V"], items)
        out.append({k: predict_logits(rec, P, dom, rec.gather(t, users), v) for k, t in reps[d].items()})
    return out


# -- matrix factorisation baseline ---------------------------------------------

def init_mf(n_users: int, n_items: int, k: int, rng: np.random.Generator,
            std: float = 0.1) -> dict[str, np.ndarray]:
    return {
        "mf.P": rng.normal(0.0, std, size=(n_users, k)),
        "mf.Q": rng.normal(0.0, std, size=(n_items, k)),
        "mf.bu": np.zeros((n_users, 1)),
        "mf.bi": np.zeros((n_items, 1)),
    }


def mf_logits(rec: Record, P: Params, users, items) -> Tensor:
    dot = rec.reduce_sum(rec.hadamard(rec.gather(P["mf.P"], users), rec.gather(P["mf.Q"], items)), axis=1)
    return rec.add(dot, rec.add(rec.gather(P["mf.bu"], users), rec.gather(P["mf.bi"], items)))


def mf_baseline_score(params: dict[str, np.ndarray], user: int, item: int) -> float:
    z = params["mf.P"][user] @ params["mf.Q"][item] + params["mf.bu"][user, 0] + params["mf.bi"][item, 0]
    return float(1.0 / (1.0 + np.exp(-z)))


# -- checkpoints -------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def config_hash(obj) -> str:
    payload = json.dumps(obj if isinstance(obj, dict) else asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def checkpoint_bytes(params: dict[str, np.ndarray], cfg_hash: str = "") -> bytes:
    """Zip archive: ``manifest.json`` plus one raw little-endian float64 buffer per tensor."""
    names = sorted(params)
    manifest = {
        "format": "nmcdr-checkpoint/1",
        "dtype": "<f8",
        "config_hash": cfg_hash,
        "tensors": [{"name": n, "shape": list(params[n].shape), "file": f"tensors/{n}.bin"} for n in names],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _ZIP_DATE),
                    json.dumps(manifest, indent=2, sort_keys=True))
        for n in names:
            data = np.ascontiguousarray(params[n], dtype="<f8").tobytes()
            zf.writestr(zipfile.ZipInfo(f"tensors/{n}.bin", _ZIP_DATE), data)
    return buf.getvalue()


def save_checkpoint(path, params: dict[str, np.ndarray], cfg_hash: str = "") -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, cfg_hash))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("dtype") != "<f8":
            raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
        params = {}
        for t in manifest["tensors"]:
            arr = np.frombuffer(zf.read(t["file"]), dtype="<f8").astype(np.float64)
            params[t["name"]] = arr.reshape(t["shape"])
    return params, manifest
