"""End-to-end audit pipeline.

Stages: data -> target -> scores -> attackers -> analyses -> export.  Every
stage derives its seed from the master seed by name, per-sample attack seeds
hash in the sample id, and the scoring stage fans out over MIAUDIT_WORKERS
processes with an order-preserving map, so reports are byte-identical across
runs and worker counts.  Stage failures re-raise with a [stage:...] tag.
"""

from __future__ import annotations

import dataclasses
import json
import multiprocessing
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .. import attack_models as am
from ..adversarial import apgd_maximize_loss
from ..errors import AuditError, ConfigError, DataError
from ..evaluation import (
    EvalReport,
    LabeledScoreSet,
    averaged_roc_on_grid,
    default_fpr_grid,
    holdout_threshold_eval,
    ratio_robustness_experiment,
    repeated_subset_experiment,
    score_histogram,
)
from ..nn_core import (
    build_mlp,
    classification_accuracy,
    empirical_risk,
    load_checkpoint,
    save_checkpoint,
    train,
)
from ..scores import (
    THRESHOLD_STRATEGIES,
    ScoreRecord,
    compute_score,
    read_score_records,
    write_score_records,
)
from .config import ATTACKER_STRATEGIES, ExperimentConfig, stage_seed
from .data import generate_synthetic_dataset, load_dataset

SCHEMA_VERSION = 1

_ATTACKER_EXTRACTORS = {
    "attacker_grad_w": "grad_w_stats",
    "attacker_grad_x": "grad_x_stats",
    "attacker_int_outs": "intermediate_outputs",
    "attacker_wb": "wb_concat",
    "attacker_ensemble": "six_scores",
}


@contextmanager
def _stage(name: str):
    try:
        yield
    except AuditError as exc:
        raise type(exc)(f"[stage:{name}] {exc}") from exc


def resolve_workers() -> int:
    raw = os.environ.get("MIAUDIT_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MIAUDIT_WORKERS must be an integer, got {raw!r}") from exc
    if workers < 1:
        raise ConfigError("MIAUDIT_WORKERS must be >= 1")
    return workers


# ---------------------------------------------------------------------------
# Per-sample scoring (worker side)
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(model, attack_template, attack_base_seed, score_names, extractor_names, dump_traces):
    _WORKER["model"] = model
    _WORKER["attack"] = attack_template
    _WORKER["attack_base"] = attack_base_seed
    _WORKER["scores"] = score_names
    _WORKER["extractors"] = extractor_names
    _WORKER["dump_traces"] = dump_traces


def _sample_attack_config(sid: int):
    return dataclasses.replace(
        _WORKER["attack"], seed=stage_seed(_WORKER["attack_base"], f"sample:{sid}")
    )


def _sample_payload(task):
    sid, x, y = task
    model = _WORKER["model"]
    scores = {}
    for name in _WORKER["scores"]:
        attack = _sample_attack_config(sid) if name == "adv_dist" else None
        scores[name] = compute_score(model, x, y, name, attack)
    feats = {}
    for ex in _WORKER["extractors"]:
        if ex == "grad_w_stats":
            feats[ex] = am.extract_grad_w_stats(model, x, y).values
        elif ex == "grad_x_stats":
            feats[ex] = am.extract_grad_x_stats(model, x, y).values
        elif ex == "intermediate_outputs":
            feats[ex] = am.extract_intermediate_outputs(model, x).values
        elif ex == "wb_concat":
            feats[ex] = am.extract_wb_features(model, x, y).values
    trace_rows = None
    if _WORKER["dump_traces"]:
        trace = apgd_maximize_loss(model, x, y, _sample_attack_config(sid))
        trace_rows = (trace.losses, trace.distances(), trace.predictions)
    return sid, scores, feats, trace_rows


def _compute_payloads(tasks, workers, init_args):
    if workers <= 1 or len(tasks) < 2:
        _init_worker(*init_args)
        try:
            return [_sample_payload(t) for t in tasks]
        finally:
            _WORKER.clear()
    chunk = max(1, len(tasks) // (workers * 4))
    with multiprocessing.Pool(workers, initializer=_init_worker, initargs=init_args) as pool:
        return pool.map(_sample_payload, tasks, chunksize=chunk)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _train_target(config: ExperimentConfig, train_ds, manifest):
    ckpt = config["target.load_checkpoint"]
    if ckpt:
        model = load_checkpoint(ckpt)
        history = []
    else:
        dims = [manifest.feature_dim, *config.hidden_dims(), manifest.n_classes]
        model = build_mlp(dims, stage_seed(config.seed, "target_init"))
        _, history = train(
            model, train_ds.samples(), config.train_config(stage_seed(config.seed, "target_train"))
        )
    return model, history


def _hist_range(name: str, values: np.ndarray, epsilon: float):
    if name == "adv_dist":
        return (0.0, epsilon)
    if name == "softmax" or name.startswith("attacker_"):
        return (0.0, 1.0)
    lo = float(values.min())
    hi = float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    return (lo, hi)


def _attacker_split(config: ExperimentConfig, n_members: int, n_nonmembers: int, any_attackers: bool):
    """Sample ids for attacker training: 50/50 members/nonmembers."""
    if not any_attackers:
        return set()
    frac = config["attacker.train_fraction"]
    k = int(round(frac * min(n_members, n_nonmembers)))
    if k < 1:
        raise ConfigError("attacker.train_fraction leaves no training samples")
    if k >= n_members or k >= n_nonmembers:
        raise ConfigError("attacker.train_fraction leaves no evaluation samples")
    rng = np.random.default_rng(stage_seed(config.seed, "attacker_split"))
    member_ids = rng.permutation(n_members)[:k]
    nonmember_ids = n_members + rng.permutation(n_nonmembers)[:k]
    return set(int(i) for i in member_ids) | set(int(i) for i in nonmember_ids)


def _train_attacker(name: str, features, labels, seed: int):
    if name in ("attacker_grad_w", "attacker_grad_x"):
        return am.fit_logistic_attacker(features, labels, seed)
    if name in ("attacker_int_outs", "attacker_wb"):
        return am.fit_mlp_attacker(features, labels, seed)
    if name == "attacker_ensemble":
        return am.build_and_train_ensemble(features, labels, seed)
    raise ConfigError(f"unknown attacker strategy {name!r}")


def run_pipeline(config: ExperimentConfig, out_dir=None):
    """Full audit; returns (EvalReport, output_dir).  Writes report.json,
    per-strategy CSVs, and model/attacker checkpoints into out_dir."""
    out = Path(out_dir if out_dir is not None else config["output.dir"])
    workers = resolve_workers()
    strategies = config.strategies()
    attacker_names = [s for s in strategies if s in ATTACKER_STRATEGIES]
    threshold_names = [s for s in strategies if s in THRESHOLD_STRATEGIES]

    with _stage("data"):
        if config["dataset.source"] == "synthetic":
            train_ds, heldout_ds, manifest = generate_synthetic_dataset(
                config["dataset.n_per_class"],
                config["dataset.classes"],
                config["dataset.dim"],
                config["dataset.separation"],
                stage_seed(config.seed, "data"),
                config["dataset.heldout_per_class"],
            )
        else:
            fmt = "csv" if config["dataset.source"] == "csv" else "binary"
            train_ds, heldout_ds, manifest = load_dataset(config["dataset.path"], fmt)

    with _stage("target"):
        model, history = _train_target(config, train_ds, manifest)
        target_summary = {
            "layer_dims": list(model.layer_dims),
            "parameter_count": model.parameter_count(),
            "epochs_run": len(history),
            "final_train_loss": float(history[-1]) if history else None,
            "train_accuracy": classification_accuracy(model, train_ds.samples()),
            "heldout_accuracy": classification_accuracy(model, heldout_ds.samples()),
            "train_risk": empirical_risk(model, train_ds.samples()),
            "heldout_risk": empirical_risk(model, heldout_ds.samples()),
        }

    n_members = len(train_ds)
    n_nonmembers = len(heldout_ds)
    member_ids = list(range(n_members))
    nonmember_ids = list(range(n_members, n_members + n_nonmembers))

    # score names needed: listed threshold strategies, plus all six when the
    # ensemble is on (its features are the six scores)
    needed_scores = list(threshold_names)
    if "attacker_ensemble" in attacker_names:
        needed_scores = list(dict.fromkeys(needed_scores + list(THRESHOLD_STRATEGIES)))
    needed_extractors = [
        _ATTACKER_EXTRACTORS[a] for a in attacker_names if _ATTACKER_EXTRACTORS[a] != "six_scores"
    ]

    with _stage("scores"):
        tasks = [(sid, train_ds.X[sid], int(train_ds.y[sid])) for sid in member_ids]
        tasks += [
            (sid, heldout_ds.X[sid - n_members], int(heldout_ds.y[sid - n_members]))
            for sid in nonmember_ids
        ]
        init_args = (
            model,
            config.attack_config(),
            stage_seed(config.seed, "attack"),
            tuple(needed_scores),
            tuple(needed_extractors),
            bool(config["debug.dump_traces"]) and "adv_dist" in needed_scores,
        )
        payloads = _compute_payloads(tasks, workers, init_args) if (needed_scores or needed_extractors) else []
        score_table = {sid: scores for sid, scores, _, _ in payloads}
        feature_table = {ex: {} for ex in needed_extractors}
        traces = {}
        for sid, _, feats, trace_rows in payloads:
            for ex, vals in feats.items():
                feature_table[ex][sid] = vals
            if trace_rows is not None:
                traces[sid] = trace_rows

    with _stage("attackers"):
        attacker_train_ids = _attacker_split(config, n_members, n_nonmembers, bool(attacker_names))
        eval_member_ids = [i for i in member_ids if i not in attacker_train_ids]
        eval_nonmember_ids = [i for i in nonmember_ids if i not in attacker_train_ids]
        train_id_list = sorted(attacker_train_ids)

        def _features_for(extractor, ids):
            if extractor == "six_scores":
                return np.array(
                    [am.assemble_score_features(score_table[i]).values for i in ids]
                )
            return np.array([feature_table[extractor][i] for i in ids])

        attackers = {}
        attacker_eval_scores = {}
        for name in attacker_names:
            extractor = _ATTACKER_EXTRACTORS[name]
            feats_train = _features_for(extractor, train_id_list)
            labels_train = np.array([1.0 if i < n_members else 0.0 for i in train_id_list])
            attacker = _train_attacker(
                name, feats_train, labels_train, stage_seed(config.seed, f"attacker:{name}")
            )
            attackers[name] = attacker
            eval_ids = eval_member_ids + eval_nonmember_ids
            vals = am.attacker_scores(attacker, _features_for(extractor, eval_ids))
            attacker_eval_scores[name] = dict(zip(eval_ids, (float(v) for v in vals)))

    # pools ordered by ascending sample id; all strategies share them
    member_pool = {}
    nonmember_pool = {}
    for name in threshold_names:
        member_pool[name] = np.array([score_table[i][name] for i in eval_member_ids])
        nonmember_pool[name] = np.array([score_table[i][name] for i in eval_nonmember_ids])
    for name in attacker_names:
        member_pool[name] = np.array([attacker_eval_scores[name][i] for i in eval_member_ids])
        nonmember_pool[name] = np.array([attacker_eval_scores[name][i] for i in eval_nonmember_ids])

    strategy_reports = {name: {} for name in strategies}
    roc_grids = {}
    histograms = {}
    grid = default_fpr_grid(config["protocol.fpr_grid_points"])

    if strategies:
        with _stage("analysis1"):
            protocol = config.protocol_config(
                len(eval_member_ids), len(eval_nonmember_ids), stage_seed(config.seed, "analysis1")
            )
            repeats = repeated_subset_experiment(member_pool, nonmember_pool, protocol)
            for name, res in repeats.items():
                strategy_reports[name]["analysis1"] = {
                    "repeats": protocol.repeats,
                    "member_subset_size": protocol.resolved_subset_size(),
                    "auroc_mean": res.auroc_mean,
                    "auroc_std": res.auroc_std,
                    "accuracy_mean": res.accuracy_mean,
                    "accuracy_std": res.accuracy_std,
                    "aurocs": [float(v) for v in res.aurocs],
                    "accuracies": [float(v) for v in res.accuracies],
                }
                mean_tpr, std_tpr = averaged_roc_on_grid(res.curves, grid)
                roc_grids[name] = (grid, mean_tpr, std_tpr)

        with _stage("analysis2"):
            seed2 = stage_seed(config.seed, "analysis2")
            for name in strategies:
                sset = LabeledScoreSet.from_pools(member_pool[name], nonmember_pool[name], name)
                fixed = 0.5 if name in ATTACKER_STRATEGIES else None
                bal, fpr = holdout_threshold_eval(
                    sset, config["protocol.holdout_fraction"], seed2, fixed_tau=fixed
                )
                strategy_reports[name]["analysis2"] = {
                    "balanced_accuracy": bal,
                    "fpr": fpr,
                    "threshold_rule": "fixed_0.5" if fixed is not None else "swept",
                }

        ratio_names = [s for s in config.ratio_strategies() if s in strategies]
        if ratio_names:
            with _stage("ratio"):
                ratios = config.ratios()
                max_frac = max(a / b for a, b in ratios)
                n_m, n_n = len(eval_member_ids), len(eval_nonmember_ids)
                base = min(n_n, int(n_m / max_frac))
                if base < 1:
                    raise ConfigError("eval pools too small for the configured ratios")
                rng = np.random.default_rng(stage_seed(config.seed, "ratio_base"))
                keep = np.sort(rng.choice(n_n, size=base, replace=False))
                for name in ratio_names:
                    strategy_reports[name]["ratio_auroc"] = ratio_robustness_experiment(
                        member_pool[name],
                        nonmember_pool[name][keep],
                        ratios,
                        repeats=config["protocol.ratio_repeats"],
                        seed=stage_seed(config.seed, "ratio"),
                    )

        with _stage("histograms"):
            for name in strategies:
                sset = LabeledScoreSet.from_pools(member_pool[name], nonmember_pool[name], name)
                rng_range = _hist_range(name, sset.scores, config["attack.epsilon"])
                histograms[name] = score_histogram(sset, config["histogram.bins"], rng_range)

    for name in strategies:
        strategy_reports[name]["kind"] = (
            "attacker" if name in ATTACKER_STRATEGIES else "threshold"
        )
        strategy_reports[name]["files"] = {
            "scores": f"scores_{name}.csv",
            "roc": f"roc_{name}.csv",
            "hist": f"hist_{name}.csv",
        }

    score_records = {}
    for name in strategies:
        records = [
            ScoreRecord(i, name, float(member_pool[name][j]), True)
            for j, i in enumerate(eval_member_ids)
        ] + [
            ScoreRecord(i, name, float(nonmember_pool[name][j]), False)
            for j, i in enumerate(eval_nonmember_ids)
        ]
        score_records[name] = records

    report = EvalReport(
        schema_version=SCHEMA_VERSION,
        seed=config.seed,
        config_echo=config.echo(),
        dataset=manifest.to_dict(),
        target=target_summary,
        splits={
            "members_total": n_members,
            "nonmembers_total": n_nonmembers,
            "attacker_train_members": sum(1 for i in attacker_train_ids if i < n_members),
            "attacker_train_nonmembers": sum(1 for i in attacker_train_ids if i >= n_members),
            "eval_members": len(eval_member_ids),
            "eval_nonmembers": len(eval_nonmember_ids),
        },
        strategies=strategy_reports,
        roc_grids=roc_grids,
        histograms=histograms,
        score_records=score_records,
    )

    with _stage("export"):
        export_report(report, out)
        _atomic_file_write(out / "target.ckpt", lambda p: save_checkpoint(model, p))
        for name, attacker in attackers.items():
            _atomic_file_write(out / f"{name}.ckpt", lambda p, a=attacker: am.save_attacker(a, p))
        if config["debug.dump_features"]:
            all_ids = eval_member_ids + eval_nonmember_ids
            for ex in needed_extractors:
                feats = [feature_table[ex][i] for i in all_ids]
                members = [i < n_members for i in all_ids]
                am.write_feature_dump(out / f"features_{ex}.csv", all_ids, feats, members)
        if traces:
            trace_dir = out / "traces"
            trace_dir.mkdir(parents=True, exist_ok=True)
            for sid, (losses, dists, preds) in sorted(traces.items()):
                _write_trace_csv(trace_dir / f"trace_{sid}.csv", losses, dists, preds)
    return report, out


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_file_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _write_trace_csv(path, losses, dists, preds) -> None:
    lines = ["iteration,loss,distance,predicted_class"]
    for i in range(len(losses)):
        lines.append(f"{i},{float(losses[i])!r},{float(dists[i])!r},{int(preds[i])}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def export_report(report: EvalReport, out_dir) -> Path:
    """Write report.json plus per-strategy CSV side files, atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    _atomic_write_text(out / "report.json", payload)
    for name, (grid, mean_tpr, std_tpr) in report.roc_grids.items():
        lines = ["fpr,tpr_mean,tpr_std"]
        for f, mu, sd in zip(grid, mean_tpr, std_tpr):
            lines.append(f"{float(f)!r},{float(mu)!r},{float(sd)!r}")
        _atomic_write_text(out / f"roc_{name}.csv", "\n".join(lines) + "\n")
    for name, hist in report.histograms.items():
        lines = ["bin_lo,bin_hi,member_count,nonmember_count"]
        for i in range(hist.member_counts.shape[0]):
            lines.append(
                f"{float(hist.edges[i])!r},{float(hist.edges[i + 1])!r},"
                f"{int(hist.member_counts[i])},{int(hist.nonmember_counts[i])}"
            )
        _atomic_write_text(out / f"hist_{name}.csv", "\n".join(lines) + "\n")
    for name, records in report.score_records.items():
        _atomic_file_write(out / f"scores_{name}.csv", lambda p, r=records: write_score_records(r, p))
    return out / "report.json"


# ---------------------------------------------------------------------------
# Re-render from dumped scores
# ---------------------------------------------------------------------------


def rerender_from_scores(config: ExperimentConfig, scores_dir, out_dir):
    """Rebuild the analyses and report from scores_<strategy>.csv files.

    Stage seeds come from the config, so a re-render of an unmodified audit
    directory reproduces the audit's numbers.  Dataset/target sections are
    carried over from an existing report.json when present.
    """
    scores_path = Path(scores_dir)
    strategies = config.strategies()
    member_pool = {}
    nonmember_pool = {}
    counts = None
    for name in strategies:
        csv_path = scores_path / f"scores_{name}.csv"
        if not csv_path.is_file():
            raise DataError(f"missing score file {csv_path}")
        records = read_score_records(csv_path)
        records.sort(key=lambda r: r.sample_id)
        member_pool[name] = np.array([r.score for r in records if r.is_member])
        nonmember_pool[name] = np.array([r.score for r in records if not r.is_member])
        pair = (len(member_pool[name]), len(nonmember_pool[name]))
        if counts is None:
            counts = pair
        elif counts != pair:
            raise ConfigError("score CSVs disagree on pool sizes across strategies")

    dataset_section, target_section, splits_section = {}, {}, {}
    old_report = scores_path / "report.json"
    if old_report.is_file():
        with open(old_report, encoding="utf-8") as fh:
            old = json.load(fh)
        dataset_section = old.get("dataset", {})
        target_section = old.get("target", {})
        splits_section = old.get("splits", {})

    strategy_reports = {name: {} for name in strategies}
    roc_grids = {}
    histograms = {}
    grid = default_fpr_grid(config["protocol.fpr_grid_points"])
    if strategies:
        n_m, n_n = counts
        with _stage("analysis1"):
            protocol = config.protocol_config(n_m, n_n, stage_seed(config.seed, "analysis1"))
            repeats = repeated_subset_experiment(member_pool, nonmember_pool, protocol)
            for name, res in repeats.items():
                strategy_reports[name]["analysis1"] = {
                    "repeats": protocol.repeats,
                    "member_subset_size": protocol.resolved_subset_size(),
                    "auroc_mean": res.auroc_mean,
                    "auroc_std": res.auroc_std,
                    "accuracy_mean": res.accuracy_mean,
                    "accuracy_std": res.accuracy_std,
                    "aurocs": [float(v) for v in res.aurocs],
                    "accuracies": [float(v) for v in res.accuracies],
                }
                mean_tpr, std_tpr = averaged_roc_on_grid(res.curves, grid)
                roc_grids[name] = (grid, mean_tpr, std_tpr)
        with _stage("analysis2"):
            seed2 = stage_seed(config.seed, "analysis2")
            for name in strategies:
                sset = LabeledScoreSet.from_pools(member_pool[name], nonmember_pool[name], name)
                fixed = 0.5 if name in ATTACKER_STRATEGIES else None
                bal, fpr = holdout_threshold_eval(
                    sset, config["protocol.holdout_fraction"], seed2, fixed_tau=fixed
                )
                strategy_reports[name]["analysis2"] = {
                    "balanced_accuracy": bal,
                    "fpr": fpr,
                    "threshold_rule": "fixed_0.5" if fixed is not None else "swept",
                }
        ratio_names = [s for s in config.ratio_strategies() if s in strategies]
        if ratio_names:
            with _stage("ratio"):
                ratios = config.ratios()
                max_frac = max(a / b for a, b in ratios)
                base = min(n_n, int(n_m / max_frac))
                if base < 1:
                    raise ConfigError("score pools too small for the configured ratios")
                rng = np.random.default_rng(stage_seed(config.seed, "ratio_base"))
                keep = np.sort(rng.choice(n_n, size=base, replace=False))
                for name in ratio_names:
                    strategy_reports[name]["ratio_auroc"] = ratio_robustness_experiment(
                        member_pool[name],
                        nonmember_pool[name][keep],
                        ratios,
                        repeats=config["protocol.ratio_repeats"],
                        seed=stage_seed(config.seed, "ratio"),
                    )
        with _stage("histograms"):
            for name in strategies:
                sset = LabeledScoreSet.from_pools(member_pool[name], nonmember_pool[name], name)
                rng_range = _hist_range(name, sset.scores, config["attack.epsilon"])
                histograms[name] = score_histogram(sset, config["histogram.bins"], rng_range)

    for name in strategies:
        strategy_reports[name]["kind"] = (
            "attacker" if name in ATTACKER_STRATEGIES else "threshold"
        )
        strategy_reports[name]["files"] = {
            "scores": f"scores_{name}.csv",
            "roc": f"roc_{name}.csv",
            "hist": f"hist_{name}.csv",
        }

    report = EvalReport(
        schema_version=SCHEMA_VERSION,
        seed=config.seed,
        config_echo=config.echo(),
        dataset=dataset_section,
        target=target_section,
        splits=splits_section,
        strategies=strategy_reports,
        roc_grids=roc_grids,
        histograms=histograms,
        score_records={},
    )
    with _stage("export"):
        export_report(report, out_dir)
    return report, Path(out_dir)
