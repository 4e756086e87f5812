"""Losses, the joint two-domain optimisation loop and the MF baseline trainer."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import CrossDomainDataset, NegativeSampler, SplitSpec
from .graph import label_head_tail, sample_matching
from .model import (DOMAINS, AblationFlags, GraphContext, ModelConfig, forward_all, init_mf,
                    init_params, mf_logits, register)
from .numerics import AdamState, NonFiniteError, Record, Tensor, adam_step
from .seeding import stream

log = logging.getLogger(__name__)

HEADS = ("g0", "g1", "g2", "g3")


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    w6: float = 1.0
    w7: float = 1.0
    w8: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    def head(self, name: str) -> float:
        return getattr(self, f"w{HEADS.index(name) + 1}")


@dataclass
class TrainConfig:
    batch_size: int = 512
    lr: float = 1e-4
    epochs: int = 100
    negatives: int = 1
    eval_every: int = 1
    patience: int = 10
    early_stopping: bool = True
    matching_size: int | None = 512
    exact_matching: bool = False
    k_head: int = 7
    resample_matching: bool = True
    record_wall_time: bool = False

    def __post_init__(self):
        for k in ("batch_size", "negatives", "eval_every", "patience"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.k_head < 0:
            raise ValueError("k_head must be >= 0")
        if self.matching_size is not None and self.matching_size < 1:
            raise ValueError("matching_size must be >= 1")

    @property
    def sample_size(self) -> int | None:
        """Matching sample size, or None for the exact fully connected sets."""
        return None if self.exact_matching else self.matching_size


class TrainingDiverged(RuntimeError):
    pass


_GRAD_LIMIT = np.sqrt(np.finfo(np.float64).max)


# -- losses ------------------------------------------------------------------------

def bce(rec: Record, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from pre-sigmoid logits.

    Written as y * softplus(-z) + (1 - y) * softplus(z): each term is a
    non-negative log-sum-exp, so no exp overflows and the result is >= 0.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape != logits.shape:
        raise ValueError(f"labels {y.shape} do not match logits {logits.shape}")
    pos = rec.hadamard(rec.softplus(rec.scale(logits, -1.0)), rec.const(y))
    neg = rec.hadamard(rec.softplus(logits), rec.const(1.0 - y))
    return rec.mean(rec.add(pos, neg))


def bce_value(logit: float, label: float) -> float:
    """Scalar reference form of :func:`bce`."""
    return float(label * np.logaddexp(0.0, -logit) + (1.0 - label) * np.logaddexp(0.0, logit))


def companion_loss(rec: Record, heads: dict[str, Tensor], labels, weights: LossWeights) -> Tensor | None:
    """sum_k w_k * mean BCE of head g_k, over the companion heads present."""
    terms = [rec.scale(bce(rec, heads[h], labels), weights.head(h)) for h in HEADS if h in heads]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = rec.add(out, t)
    return out


@dataclass
class LossParts:
    total: Tensor
    parts: dict[str, Tensor]


def total_loss(rec: Record, outputs: list[dict[str, Tensor]], labels: list[np.ndarray],
               weights: LossWeights, flags: AblationFlags) -> LossParts:
    """w5 L_CO^Z + w6 L_CO^Zbar + w7 L_cls^Z + w8 L_cls^Zbar."""
    parts: dict[str, Tensor] = {}
    terms = []
    co_w = (weights.w5, weights.w6)
    cls_w = (weights.w7, weights.w8)
    for d, dom in enumerate(DOMAINS):
        cls = bce(rec, outputs[d]["final"], labels[d])
        parts[f"loss_cls_{dom}"] = cls
        terms.append(rec.scale(cls, cls_w[d]))
        if flags.use_companion_losses:
            co = companion_loss(rec, outputs[d], labels[d], weights)
            if co is not None:
                parts[f"loss_co_{dom}"] = co
                terms.append(rec.scale(co, co_w[d]))
    total = terms[0]
    for t in terms[1:]:
        total = rec.add(total, t)
    return LossParts(total, parts)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    best_epoch: int = -1
    context: GraphContext | None = None
    stopped_early: bool = False


@dataclass
class TrainSetup:
    """Everything derived from data that the loop and evaluation share."""

    dataset: CrossDomainDataset
    splits: SplitSpec
    context: GraphContext
    heads: tuple[np.ndarray, np.ndarray]
    samplers: tuple[NegativeSampler, NegativeSampler]
    train_pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def prepare_setup(dataset: CrossDomainDataset, splits: SplitSpec, tcfg: TrainConfig, seed: int) -> TrainSetup:
    from .graph import build_graph
    graphs = tuple(build_graph(dom, splits.domains[d]) for d, dom in enumerate(dataset.domains))
    heads = tuple(label_head_tail(g, tcfg.k_head) for g in graphs)
    counterparts = (dataset.counterpart(0), dataset.counterpart(1))
    matching = sample_matching(heads, counterparts, tcfg.sample_size, seed, 0)
    ctx = GraphContext(graphs, counterparts, matching)
    samplers = tuple(NegativeSampler(dom) for dom in dataset.domains)
    pairs = [(splits.domains[d].train_user, splits.domains[d].train_item) for d in (0, 1)]
    return TrainSetup(dataset, splits, ctx, heads, samplers, pairs)


def _joint_batches(sizes, batch, epoch, seed):
    """Shuffled positions per domain; the smaller domain wraps around."""
    perms = [stream(seed, "shuffle", epoch, d).permutation(n) for d, n in enumerate(sizes)]
    n_steps = int(np.ceil(max(sizes) / batch))
    for s in range(n_steps):
        pos = np.arange(s * batch, min((s + 1) * batch, max(sizes)))
        yield s, [perms[d][pos % sizes[d]] for d in range(len(sizes))]


def _norm_report(params):
    norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    worst = max(norms, key=lambda k: norms[k] if np.isfinite(norms[k]) else np.inf)
    return worst, norms[worst]


def train(setup: TrainSetup, mcfg: ModelConfig, tcfg: TrainConfig, flags: AblationFlags,
          weights: LossWeights | None = None, seed: int = 0,
          validate: Callable[[dict, GraphContext], tuple[float, float]] | None = None,
          init: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Joint optimisation of both domains.

    ``validate(params, ctx)`` returns per-domain validation NDCG@10; when
    given, the best-scoring parameters (mean over domains) are returned and
    training stops after ``patience`` evaluations without improvement.
    """
    weights = weights or LossWeights()
    ds = setup.dataset
    params = init if init is not None else init_params(
        mcfg, (ds.domains[0].n_users, ds.domains[1].n_users),
        (ds.domains[0].n_items, ds.domains[1].n_items), stream(seed, "init"))
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    state = AdamState(lr=tcfg.lr)
    ctx = setup.context
    history: list[dict] = []
    best, best_epoch, best_params, bad = -np.inf, -1, None, 0
    sizes = [len(p[0]) for p in setup.train_pairs]
    neg_rng = stream(seed, "negatives")
    stopped = False
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        if tcfg.resample_matching and tcfg.sample_size is not None and epoch > 0:
            ctx = ctx.with_matching(sample_matching(setup.heads, ctx.counterparts,
                                                    tcfg.sample_size, seed, epoch))
        sums: dict[str, float] = {}
        n_steps = 0
        for step, picks in _joint_batches(sizes, tcfg.batch_size, epoch, seed):
            batches, labels = [], []
            for d in (0, 1):
                u = setup.train_pairs[d][0][picks[d]]
                i = setup.train_pairs[d][1][picks[d]]
                nu = np.repeat(u, tcfg.negatives)
                ni = setup.samplers[d].sample(nu, neg_rng)
                batches.append((np.concatenate([u, nu]), np.concatenate([i, ni])))
                labels.append(np.concatenate([np.ones(len(u)), np.zeros(len(nu))]))
            rec = Record()
            P = register(rec, params)
            outputs = forward_all(rec, P, ctx, flags, batches)
            loss = total_loss(rec, outputs, labels, weights, flags)
            try:
                rec.forward()
            except NonFiniteError as exc:
                name, norm = _norm_report(params)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {step}: {exc}; "
                                       f"largest parameter norm {name}={norm:.3e}") from exc
            grads = rec.backward(loss.total)
            # squared gradients feed Adam's second moment; overflow there would silently zero steps
            bad_grads = [k for k, g in grads.items()
                         if g.size and not np.abs(g).max() < _GRAD_LIMIT]
            if bad_grads:
                name, norm = _norm_report(params)
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {step} for "
                                       f"{bad_grads[:5]}; largest parameter norm {name}={norm:.3e}")
            adam_step(state, params, grads)
            bad_params = [k for k, v in params.items() if not np.isfinite(v).all()]
            if bad_params:
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, batch {step}: "
                                       f"{bad_params[:5]}")
            sums["loss_total"] = sums.get("loss_total", 0.0) + float(rec.value(loss.total)[0, 0])
            for k, t in loss.parts.items():
                sums[k] = sums.get(k, 0.0) + float(rec.value(t)[0, 0])
            n_steps += 1
        entry = {"epoch": epoch}
        for k in ("loss_total", "loss_co_Z", "loss_co_Zbar", "loss_cls_Z", "loss_cls_Zbar"):
            entry[k] = sums[k] / n_steps if k in sums else None
        entry["val_ndcg_Z"] = entry["val_ndcg_Zbar"] = None
        if validate is not None and (epoch + 1) % tcfg.eval_every == 0:
            vz, vzb = validate(params, ctx)
            entry["val_ndcg_Z"], entry["val_ndcg_Zbar"] = vz, vzb
            score = 0.5 * (vz + vzb)
            if score > best:
                best, best_epoch, bad = score, epoch, 0
                best_params = copy.deepcopy(params)
            else:
                bad += 1
        entry["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3) if tcfg.record_wall_time else None
        history.append(entry)
        log.info("epoch %d loss %.5f", epoch, entry["loss_total"])
        if validate is not None and tcfg.early_stopping and bad >= tcfg.patience:
            stopped = True
            break
    if best_params is not None:
        params = best_params
    return TrainResult(params, history, best_epoch, ctx, stopped)


def train_mf(train_user: np.ndarray, train_item: np.ndarray, sampler: NegativeSampler,
             n_users: int, n_items: int, k: int = 8, epochs: int = 30, lr: float = 0.01,
             batch_size: int = 512, seed: int = 0) -> tuple[dict[str, np.ndarray], list[float]]:
    """Logistic matrix factorisation with one sampled negative per positive."""
    params = init_mf(n_users, n_items, k, stream(seed, "init"))
    state = AdamState(lr=lr)
    neg_rng = stream(seed, "negatives")
    losses = []
    for epoch in range(epochs):
        total, steps = 0.0, 0
        for _, (pick,) in _joint_batches([len(train_user)], batch_size, epoch, seed):
            u, i = train_user[pick], train_item[pick]
            ni = sampler.sample(u, neg_rng)
            rec = Record()
            P = register(rec, params)
            z = mf_logits(rec, P, np.concatenate([u, u]), np.concatenate([i, ni]))
            loss = bce(rec, z, np.concatenate([np.ones(len(u)), np.zeros(len(u))]))
            rec.forward()
            adam_step(state, params, rec.backward(loss))
            total += float(rec.value(loss)[0, 0])
            steps += 1
        losses.append(total / steps)
    return params, losses
