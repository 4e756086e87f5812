"""Leave-one-out ranking evaluation: HR@K and NDCG@K against sampled negatives."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import DOMAIN_NAMES, CrossDomainDataset, SplitSpec, sample_negatives
from .model import AblationFlags, GraphContext, Params, predict_logits, register, represent
from .numerics import Record

log = logging.getLogger(__name__)

N_NEGATIVES = 199


def rank_metrics(scores, pos_index: int, k: int = 10, candidate_ids=None) -> tuple[int, float, float]:
    """(hit, ndcg, rank) of the positive among ``scores``.

    rank = 1 + #(scores strictly above the positive) + 0.5 * #(other scores
    equal to it); hit = rank <= k; ndcg = 1/log2(rank + 1) when hit, else 0.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 0 <= pos_index < len(s):
        raise IndexError(f"positive index {pos_index} outside {len(s)} candidates")
    if candidate_ids is not None:
        ids = np.asarray(candidate_ids)
        if len(ids) != len(s):
            raise ValueError("candidate_ids and scores differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate candidate ids")
    p = s[pos_index]
    greater = int(np.count_nonzero(s > p))
    ties = int(np.count_nonzero(s == p)) - 1
    rank = 1.0 + greater + 0.5 * ties
    hit = int(rank <= k)
    return hit, (1.0 / np.log2(rank + 1.0) if hit else 0.0), rank


@dataclass
class DomainMetrics:
    hr: float
    ndcg: float
    users: int
    skipped: int = 0


@dataclass
class EvalReport:
    domains: dict[str, DomainMetrics]
    metadata: dict = field(default_factory=dict)
    per_user: list[tuple[str, int, float, int, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"domains": {k: asdict(v) for k, v in self.domains.items()}, "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_user_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "user_id", "rank", "hit", "ndcg"])
        for dom, u, rank, hit, ndcg in self.per_user:
            w.writerow([dom, u, repr(float(rank)), hit, repr(float(ndcg))])
        return buf.getvalue()

    def ndcg(self) -> tuple[float, float]:
        return tuple(self.domains[d].ndcg for d in DOMAIN_NAMES)


def candidate_lists(dataset: CrossDomainDataset, splits: SplitSpec, d: int, seed: int,
                    which: str = "test") -> tuple[np.ndarray, np.ndarray, int]:
    """Users, their ``1 + 199`` candidate items (positive first) and the skip count."""
    dom = dataset.domains[d]
    target = splits.domains[d].test_item if which == "test" else splits.domains[d].val_item
    mode = "eval" if which == "test" else "val"
    users, cands, skipped = [], [], 0
    for u in np.flatnonzero(target >= 0):
        try:
            neg = sample_negatives(dom, int(u), N_NEGATIVES, seed, mode)
        except ValueError:
            skipped += 1
            continue
        users.append(u)
        cands.append(np.concatenate([[target[u]], neg]))
    if not users:
        return np.zeros(0, dtype=np.int64), np.zeros((0, N_NEGATIVES + 1), dtype=np.int64), skipped
    return np.asarray(users, dtype=np.int64), np.vstack(cands).astype(np.int64), skipped


def evaluate_scores(score_fn: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
                    dataset: CrossDomainDataset, splits: SplitSpec, seed: int, k: int = 10,
                    which: str = "test", metadata: dict | None = None) -> EvalReport:
    """Rank each held-out positive against 199 negatives.

    ``score_fn(d, users, items)`` returns one score per (user, item) pair of
    domain ``d``; any monotone transform of the probability works.
    """
    domains, rows = {}, []
    for d, name in enumerate(DOMAIN_NAMES):
        users, cands, skipped = candidate_lists(dataset, splits, d, seed, which)
        if len(users) == 0:
            domains[name] = DomainMetrics(0.0, 0.0, 0, skipped)
            continue
        scores = score_fn(d, np.repeat(users, cands.shape[1]), cands.ravel()).reshape(cands.shape)
        hits, ndcgs = np.zeros(len(users)), np.zeros(len(users))
        for r, u in enumerate(users):
            hits[r], ndcgs[r], rank = rank_metrics(scores[r], 0, k)
            rows.append((name, int(u), rank, int(hits[r]), float(ndcgs[r])))
        domains[name] = DomainMetrics(float(hits.mean()), float(ndcgs.mean()), len(users), skipped)
        if skipped:
            log.warning("domain %s: %d users skipped (too few eligible negatives)", name, skipped)
    return EvalReport(domains, dict(metadata or {}), rows)


def nmcdr_scorer(params: dict[str, np.ndarray], ctx: GraphContext, flags: AblationFlags,
                 chunk: int = 20000) -> Callable[[int, np.ndarray, np.ndarray], np.ndarray]:
    """Logits from the final representation, computed once for all users."""
    rec = Record()
    P = register(rec, params)
    reps = represent(rec, P, ctx, flags)
    rec.forward()
    finals = [rec.value(r["final"]) for r in reps]

    def score(d, users, items):
        dom = DOMAIN_NAMES[d]
        out = np.empty(len(users))
        for lo in range(0, len(users), chunk):
            sl = slice(lo, lo + chunk)
            r = Record()
            head = Params({k: r.const(v) for k, v in params.items() if k.startswith(f"{dom}.mlp.")})
            z = predict_logits(r, head, dom, r.const(finals[d][users[sl]]),
                               r.const(params[f"{dom}.V"][items[sl]]))
            out[sl] = r.forward(z)[:, 0]
        return out

    return score


def evaluate(params: dict[str, np.ndarray], ctx: GraphContext, flags: AblationFlags,
             dataset: CrossDomainDataset, splits: SplitSpec, seed: int, which: str = "test",
             metadata: dict | None = None) -> EvalReport:
    meta = {"K_u": dataset.k_u, "D_s": dataset.d_s, "flags": asdict(flags), "seed": seed, "split": which}
    meta.update(metadata or {})
    return evaluate_scores(nmcdr_scorer(params, ctx, flags), dataset, splits, seed,
                           which=which, metadata=meta)
