"""One experiment end to end: data, training, evaluation and its on-disk artifacts.

Every artifact carries ``config_hash`` (the resolved configuration without
the output path) and ``data_hash`` (the indexed dataset and split), either
inline or through ``manifest.json`` for formats with a fixed record layout.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, with_override
from .data import (DOMAIN_NAMES, CrossDomainDataset, DomainIndex, RawInteraction, SplitSpec, apply_density,
                   build_cross, from_arrays, ingest, split, to_arrays)
from .evaluation import EvalReport, evaluate
from .io_utils import atomic_write_bytes, atomic_write_text, dump_json, npz_bytes, sha256_bytes, sha256_file
from .model import AblationFlags, checkpoint_bytes, load_checkpoint
from .stability import compress, random_model, stability_check
from .synth import generate
from .training import TrainResult, prepare_setup, train
from .seeding import stream

log = logging.getLogger(__name__)

PREPARED_ARRAYS = "prepared.npz"
PREPARED_META = "prepared.json"
VARIANTS = ("full", "w/o-Igm", "w/o-Cgm", "w/o-Inc", "w/o-Sup")

PREPROCESSING = ("per-domain: collapse duplicate (user, item) pairs keeping the latest timestamp, "
                 "then drop users below data.min_interactions; then intersect user keys, expose "
                 "round(K_u * |intersection|) pairs, subsample edges by D_s, and split leave-one-out")


def _domain_from_edges(name, edges, user_keys, item_keys, min_interactions):
    raws = [RawInteraction(user_keys[u], item_keys[i], 1.0, t) for u, i, t in edges]
    return DomainIndex.from_interactions(raws, min_interactions, name)


def build_dataset(cfg: ExperimentConfig) -> tuple[CrossDomainDataset, SplitSpec]:
    """Ingest (files, prepared artifacts, or the synthetic generator), overlap, density, split."""
    dc = cfg.data
    if dc.prepared:
        return load_prepared(dc.prepared)
    if dc.z_path or dc.zbar_path:
        if not (dc.z_path and dc.zbar_path):
            raise ValueError("data.z_path and data.zbar_path must both be set")
        dz = ingest(dc.z_path, dc.format, dc.min_interactions, name="Z")
        dzb = ingest(dc.zbar_path, dc.format, dc.min_interactions, name="Zbar")
    else:
        syn = generate(cfg.synth)
        dz, dzb = (_domain_from_edges(DOMAIN_NAMES[d], syn.edges[d], syn.user_keys[d], syn.item_keys[d],
                                      dc.min_interactions) for d in (0, 1))
    ds = build_cross(dz, dzb, dc.k_u, cfg.seed)
    ds = apply_density(ds, dc.d_s, cfg.seed, dc.split_min_interactions)
    return ds, split(ds, cfg.seed, dc.validation, dc.split_min_interactions)


def data_hash(ds: CrossDomainDataset, sp: SplitSpec) -> str:
    arrays, meta = to_arrays(ds, sp)
    return sha256_bytes(npz_bytes(arrays) + json.dumps(meta, sort_keys=True).encode())[:16]


def dataset_statistics(ds: CrossDomainDataset, sp: SplitSpec) -> dict:
    stats = ds.statistics()
    for name, s in zip(DOMAIN_NAMES, sp.domains):
        stats[name]["test_users"] = int(len(s.test_users()))
        stats[name]["excluded_from_split"] = int(s.excluded)
        stats[name]["train_edges"] = int(len(s.train_user))
    stats["preprocessing"] = PREPROCESSING
    return stats


def save_prepared(out_dir, ds: CrossDomainDataset, sp: SplitSpec, cfg: ExperimentConfig) -> dict:
    out = Path(out_dir)
    arrays, meta = to_arrays(ds, sp)
    atomic_write_bytes(out / PREPARED_ARRAYS, npz_bytes(arrays))
    atomic_write_text(out / PREPARED_META, dump_json(meta))
    stats = {**dataset_statistics(ds, sp), "config_hash": cfg.hash(), "data_hash": data_hash(ds, sp)}
    atomic_write_text(out / "stats.json", dump_json(stats))
    return stats


def load_prepared(path) -> tuple[CrossDomainDataset, SplitSpec]:
    path = Path(path)
    with np.load(path / PREPARED_ARRAYS, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads((path / PREPARED_META).read_text())
    return from_arrays(arrays, meta)


# -- a single run --------------------------------------------------------------------

@dataclass
class RunOutcome:
    report: EvalReport
    result: TrainResult
    config_hash: str
    data_hash: str
    files: dict


def _history_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=False, allow_nan=False) + "\n" for h in history)


def run_experiment(cfg: ExperimentConfig, out_dir=None, data=None) -> RunOutcome:
    """Train and evaluate one configuration; write artifacts when ``out_dir`` is given."""
    ds, sp = data if data is not None else build_dataset(cfg)
    cfg_hash, d_hash = cfg.hash(), data_hash(ds, sp)
    setup = prepare_setup(ds, sp, cfg.train, cfg.seed)
    validate = None
    if cfg.data.validation:
        def validate(params, ctx):
            return evaluate(params, ctx, cfg.flags, ds, sp, cfg.seed, which="val").ndcg()
    result = train(setup, cfg.model, cfg.train, cfg.flags, cfg.loss, cfg.seed, validate)
    ckpt = checkpoint_bytes(result.params, cfg_hash)
    meta = {"config_hash": cfg_hash, "data_hash": d_hash, "checkpoint_sha256": sha256_bytes(ckpt),
            "best_epoch": result.best_epoch, "epochs_run": len(result.history)}
    report = evaluate(result.params, result.context, cfg.flags, ds, sp, cfg.seed, metadata=meta)
    files: dict = {}
    if out_dir is not None:
        out = Path(out_dir)
        payloads = {
            # the output path is left out so identical runs in different places match byte for byte
            "config.json": dump_json({k: v for k, v in cfg.to_dict().items() if k != "out"}).encode(),
            "stats.json": dump_json({**dataset_statistics(ds, sp), "config_hash": cfg_hash,
                                     "data_hash": d_hash}).encode(),
            "history.jsonl": _history_jsonl(result.history).encode(),
            "checkpoint.zip": ckpt,
            "report.json": report.to_json().encode(),
            "peruser.csv": report.per_user_csv().encode(),
        }
        for name, blob in payloads.items():
            atomic_write_bytes(out / name, blob)
            files[name] = sha256_bytes(blob)
        manifest = {"config_hash": cfg_hash, "data_hash": d_hash, "files": files}
        atomic_write_text(out / "manifest.json", dump_json(manifest))
    return RunOutcome(report, result, cfg_hash, d_hash, files)


# -- sweeps ----------------------------------------------------------------------------

def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in text)


def sweep_jobs(cfg: ExperimentConfig) -> list[tuple[str, object, int, ExperimentConfig, str]]:
    """(variant, value, seed, config, relative output dir) for every sweep cell."""
    sw = cfg.sweep
    jobs = []
    for variant in sw.variants:
        flags = AblationFlags.variant(variant)
        for value in sw.values:
            base = with_override(cfg, sw.parameter, value)
            for seed in sw.seeds:
                c = replace(base, seed=int(seed), flags=flags)
                rel = f"{_slug(variant)}/{_slug(sw.parameter)}={_slug(str(value))}/seed={seed}"
                jobs.append((variant, value, int(seed), c, rel))
    return jobs


def _run_job(args):
    raw, out = args
    from .config import from_dict
    outcome = run_experiment(from_dict(raw), out)
    return outcome.report.to_dict()


def summarize(rows: list[dict]) -> list[dict]:
    """Mean, std (population) and best NDCG/HR over seeds per (variant, value)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["variant"], json.dumps(r["value"])), []).append(r)
    out = []
    for (variant, value), rs in groups.items():
        nd = np.array([r["ndcg"] for r in rs])
        hr = np.array([r["hr"] for r in rs])
        out.append({"variant": variant, "value": json.loads(value), "runs": len(rs),
                    "ndcg_mean": float(nd.mean()), "ndcg_std": float(nd.std()), "ndcg_best": float(nd.max()),
                    "hr_mean": float(hr.mean()), "hr_std": float(hr.std()), "hr_best": float(hr.max()),
                    "seeds": [r["seed"] for r in rs]})
    return out


def plot_csv(parameter: str, summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([parameter, "variant", "ndcg_mean", "ndcg_std", "ndcg_best", "hr_mean", "hr_std", "runs"])
    for s in summary:
        w.writerow([s["value"], s["variant"], repr(s["ndcg_mean"]), repr(s["ndcg_std"]), repr(s["ndcg_best"]),
                    repr(s["hr_mean"]), repr(s["hr_std"]), s["runs"]])
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    out = Path(out_dir)
    cells = sweep_jobs(cfg)
    args = [(c.to_dict(), str(out / rel)) for _, _, _, c, rel in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_job, args))
    else:
        reports = [_run_job(a) for a in args]
    rows = []
    for (variant, value, seed, _, rel), rep in zip(cells, reports):
        nd = [rep["domains"][d]["ndcg"] for d in DOMAIN_NAMES]
        hr = [rep["domains"][d]["hr"] for d in DOMAIN_NAMES]
        rows.append({"variant": variant, "value": value, "seed": seed, "dir": rel,
                     "ndcg": float(np.mean(nd)), "hr": float(np.mean(hr)),
                     "ndcg_Z": nd[0], "ndcg_Zbar": nd[1]})
    summary = summarize(rows)
    result = {"parameter": cfg.sweep.parameter, "config_hash": cfg.hash(), "runs": rows, "summary": summary}
    atomic_write_text(out / "sweep.json", dump_json(result))
    atomic_write_text(out / "plotdata" / f"sweep_{_slug(cfg.sweep.parameter)}.csv",
                      plot_csv(cfg.sweep.parameter, summary))
    return result


# -- stability and reports -----------------------------------------------------------------

def run_stability(cfg: ExperimentConfig) -> dict:
    sc = cfg.stability
    diags = []
    if sc.checkpoint:
        params, manifest = load_checkpoint(sc.checkpoint)
        source = {"checkpoint": sc.checkpoint, "checkpoint_sha256": sha256_file(sc.checkpoint)}
        models = [compress(params, DOMAIN_NAMES[k % 2], sc.n_nodes, sc.edge_prob,
                           stream(cfg.seed, "stability", 1, k)) for k in range(sc.configurations)]
    else:
        source = {"random": True}
        models = [random_model(stream(cfg.seed, "stability", 1, k), sc.n_nodes, sc.in_dim, sc.hidden,
                               sc.out_dim, sc.edge_prob, sc.weight_scale) for k in range(sc.configurations)]
    for k, m in enumerate(models):
        d = stability_check(m, sc.trials, sc.perturbation, seed=cfg.seed + k, c_sf=sc.c_sf, c_sp=sc.c_sp)
        diags.append(d.to_dict())
    return {"config_hash": cfg.hash(), **source, "trials": sc.trials, "configurations": len(diags),
            "all_within_bound": all(d["within_bound"] for d in diags),
            "max_ratio_over_bound": max((d["empirical_ratio"] / d["gamma_hat"] if d["gamma_hat"] else 0.0)
                                        for d in diags),
            "diagnostics": diags}


def collect_reports(paths) -> list[dict]:
    """Rows (run dir, flags, K_u, D_s, seed, metrics) from every report.json under ``paths``."""
    rows = []
    for p in paths:
        p = Path(p)
        found = [p] if p.is_file() else sorted(p.rglob("report.json"))
        for f in found:
            rep = json.loads(f.read_text())
            meta = rep["metadata"]
            nd = [rep["domains"][d]["ndcg"] for d in DOMAIN_NAMES]
            hr = [rep["domains"][d]["hr"] for d in DOMAIN_NAMES]
            variant = next((v for v in VARIANTS if asdict(AblationFlags.variant(v)) == meta["flags"]), "custom")
            rows.append({"dir": str(f.parent), "variant": variant, "value": meta["K_u"], "D_s": meta["D_s"],
                         "seed": meta["seed"], "ndcg": float(np.mean(nd)), "hr": float(np.mean(hr)),
                         "config_hash": meta.get("config_hash"), "data_hash": meta.get("data_hash")})
    return rows
