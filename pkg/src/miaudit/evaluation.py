"""Attack evaluation: tie-aware ROC/AUROC, threshold selection, the repeated
balanced protocol, the imbalanced holdout protocol, ratio robustness, grid
ROC averaging, and score histograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvaluationError

DEFAULT_FPR_GRID_POINTS = 201


@dataclass(frozen=True)
class LabeledScoreSet:
    """Scores with membership ground truth; higher score = more member-like."""

    scores: np.ndarray
    is_member: np.ndarray
    strategy: str = ""

    @classmethod
    def from_arrays(cls, scores, is_member, strategy: str = "") -> "LabeledScoreSet":
        s = np.asarray(scores, dtype=np.float64).ravel()
        m = np.asarray(is_member, dtype=bool).ravel()
        if s.shape[0] != m.shape[0]:
            raise EvaluationError("scores and labels differ in length")
        if s.shape[0] == 0:
            raise EvaluationError("empty score set")
        if not np.all(np.isfinite(s)):
            raise EvaluationError("scores must be finite")
        return cls(s, m, strategy)

    @classmethod
    def from_pools(cls, member_scores, nonmember_scores, strategy: str = "") -> "LabeledScoreSet":
        ms = np.asarray(member_scores, dtype=np.float64).ravel()
        ns = np.asarray(nonmember_scores, dtype=np.float64).ravel()
        return cls.from_arrays(
            np.concatenate([ms, ns]),
            np.concatenate([np.ones(len(ms), bool), np.zeros(len(ns), bool)]),
            strategy,
        )


def _require_both_classes(score_set: LabeledScoreSet) -> None:
    n_m = int(score_set.is_member.sum())
    if n_m == 0 or n_m == score_set.is_member.shape[0]:
        raise EvaluationError("score set needs both members and nonmembers")


@dataclass(frozen=True)
class ROCCurve:
    """Operating points swept over all distinct thresholds, ties grouped.

    Starts at (0, 0) with threshold +inf and ends at (1, 1); fpr and tpr are
    non-decreasing.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_curve(score_set: LabeledScoreSet) -> ROCCurve:
    _require_both_classes(score_set)
    s = score_set.scores
    m = score_set.is_member
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    mm = m[order]
    # last index of each tie group
    ends = np.nonzero(np.diff(ss) != 0)[0]
    ends = np.append(ends, ss.shape[0] - 1)
    tp = np.cumsum(mm)[ends]
    fp = np.cumsum(~mm)[ends]
    n_m = float(mm.sum())
    n_n = float((~mm).sum())
    fpr = np.concatenate([[0.0], fp / n_n])
    tpr = np.concatenate([[0.0], tp / n_m])
    thresholds = np.concatenate([[math.inf], ss[ends]])
    return ROCCurve(fpr, tpr, thresholds)


def auroc(score_set: LabeledScoreSet) -> float:
    """Trapezoid area under the tie-grouped ROC; equals the tied-rank
    Mann-Whitney statistic."""
    curve = roc_curve(score_set)
    return float(
        np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) * 0.5)
    )


def _boundary_sweep(score_set: LabeledScoreSet):
    """Candidate decision boundaries at tie-group edges, descending scores.

    Yields arrays (counts of predicted members at each boundary) used by the
    threshold pickers: boundary j predicts "member" for the top j scores.
    """
    s = score_set.scores
    m = score_set.is_member
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    mm = m[order]
    ends = np.nonzero(np.diff(ss) != 0)[0]
    ends = np.append(ends, ss.shape[0] - 1)
    tp = np.concatenate([[0], np.cumsum(mm)[ends]]).astype(np.float64)
    fp = np.concatenate([[0], np.cumsum(~mm)[ends]]).astype(np.float64)
    boundaries = np.concatenate([[0], ends + 1])
    return ss, boundaries, tp, fp


def _boundary_threshold(ss: np.ndarray, j: int) -> float:
    if j == 0:
        return math.inf
    if j == ss.shape[0]:
        return -math.inf
    return float(0.5 * (ss[j - 1] + ss[j]))


def best_threshold_accuracy(score_set: LabeledScoreSet) -> tuple[float, float]:
    """(tau, accuracy) maximizing plain accuracy of score >= tau.

    The sweep covers every distinct operating point (midpoints between
    adjacent distinct scores plus both infinities); among ties the smallest
    tau wins.
    """
    _require_both_classes(score_set)
    ss, boundaries, tp, fp = _boundary_sweep(score_set)
    n_m = float(score_set.is_member.sum())
    n_n = float(score_set.scores.shape[0] - n_m)
    acc = (tp + (n_n - fp)) / (n_m + n_n)
    best = acc.max()
    # largest boundary index achieving the max <=> smallest tau
    j = int(np.nonzero(acc == best)[0][-1])
    return _boundary_threshold(ss, int(boundaries[j])), float(best)


def _best_balanced_threshold(score_set: LabeledScoreSet) -> float:
    ss, boundaries, tp, fp = _boundary_sweep(score_set)
    n_m = float(score_set.is_member.sum())
    n_n = float(score_set.scores.shape[0] - n_m)
    bal = 0.5 * (tp / n_m + (n_n - fp) / n_n)
    j = int(np.nonzero(bal == bal.max())[0][-1])
    return _boundary_threshold(ss, int(boundaries[j]))


def decision_rates(score_set: LabeledScoreSet, tau: float) -> tuple[float, float, float]:
    """(balanced_accuracy, fpr, tpr) of the rule score >= tau."""
    _require_both_classes(score_set)
    pred = score_set.scores >= tau
    m = score_set.is_member
    tpr = float(pred[m].mean())
    fpr = float(pred[~m].mean())
    return 0.5 * (tpr + (1.0 - fpr)), fpr, tpr


def holdout_threshold_eval(
    score_set: LabeledScoreSet,
    holdout_fraction: float = 0.8,
    seed: int = 0,
    fixed_tau=None,
) -> tuple[float, float]:
    """Imbalanced-aware protocol: pick tau for balanced accuracy on a
    stratified holdout_fraction of the data, report (balanced_accuracy, fpr)
    on the rest.  fixed_tau skips the sweep (trained attackers use 0.5).
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie strictly between 0 and 1")
    _require_both_classes(score_set)
    rng = np.random.default_rng(seed)
    sel_idx, eval_idx = [], []
    for cls in (True, False):
        idx = np.nonzero(score_set.is_member == cls)[0]
        idx = idx[rng.permutation(idx.shape[0])]
        cut = int(round(holdout_fraction * idx.shape[0]))
        sel_idx.append(idx[:cut])
        eval_idx.append(idx[cut:])
    sel = np.concatenate(sel_idx)
    ev = np.concatenate(eval_idx)
    if min(len(i) for i in sel_idx) == 0 or min(len(i) for i in eval_idx) == 0:
        raise EvaluationError("degenerate holdout split: a side lost a class")
    eval_set = LabeledScoreSet(score_set.scores[ev], score_set.is_member[ev])
    if fixed_tau is None:
        sel_set = LabeledScoreSet(score_set.scores[sel], score_set.is_member[sel])
        tau = _best_balanced_threshold(sel_set)
    else:
        tau = float(fixed_tau)
    bal, fpr, _ = decision_rates(eval_set, tau)
    return bal, fpr


def averaged_roc_on_grid(curves, fpr_grid) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of TPR at fixed FPR grid points.

    Each curve is reduced to one (max) TPR per distinct FPR, then linearly
    interpolated on the grid.
    """
    grid = np.asarray(fpr_grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("fpr grid must be non-empty")
    if np.any(np.diff(grid) <= 0) or grid[0] < 0 or grid[-1] > 1:
        raise ConfigError("fpr grid must be strictly increasing within [0, 1]")
    curves = list(curves)
    if not curves:
        raise ConfigError("need at least one ROC curve to average")
    rows = []
    for c in curves:
        uniq = np.unique(c.fpr)
        # keep the highest TPR at each FPR: last occurrence along the curve
        idx = np.searchsorted(c.fpr, uniq, side="right") - 1
        rows.append(np.interp(grid, uniq, c.tpr[idx]))
    stack = np.vstack(rows)
    return stack.mean(axis=0), stack.std(axis=0)


def default_fpr_grid(points: int = DEFAULT_FPR_GRID_POINTS) -> np.ndarray:
    if points < 2:
        raise ConfigError("fpr grid needs at least 2 points")
    return np.linspace(0.0, 1.0, points)


@dataclass(frozen=True)
class ProtocolConfig:
    """Shape of the repeated balanced-subset protocol."""

    member_pool_size: int
    nonmember_pool_size: int
    member_subset_size: int = 0  # 0 = derive from ratio
    repeats: int = 20
    ratio: tuple = (1, 1)  # member:nonmember target for derived subsets
    holdout_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.member_pool_size < 1 or self.nonmember_pool_size < 1:
            raise ConfigError("protocol pools must be non-empty")
        if self.repeats < 1:
            raise ConfigError("protocol repeats must be >= 1")
        if self.member_subset_size < 0:
            raise ConfigError("member_subset_size must be >= 0")
        if self.member_subset_size > self.member_pool_size:
            raise ConfigError("member_subset_size exceeds the member pool")
        a, b = self.ratio
        if a < 1 or b < 1:
            raise ConfigError("protocol ratio parts must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie strictly between 0 and 1")

    def resolved_subset_size(self) -> int:
        if self.member_subset_size:
            return self.member_subset_size
        a, b = self.ratio
        want = int(round(self.nonmember_pool_size * a / b))
        size = min(self.member_pool_size, want)
        if size < 1:
            raise ConfigError("derived member subset is empty")
        return size


@dataclass
class StrategyRepeats:
    """Per-repeat metrics for one strategy under the balanced protocol."""

    aurocs: np.ndarray
    accuracies: np.ndarray
    curves: list = field(default_factory=list)

    @property
    def auroc_mean(self) -> float:
        return float(self.aurocs.mean())

    @property
    def auroc_std(self) -> float:
        return float(self.aurocs.std())

    @property
    def accuracy_mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def accuracy_std(self) -> float:
        return float(self.accuracies.std())


def repeated_subset_experiment(
    member_scores: dict,
    nonmember_scores: dict,
    protocol: ProtocolConfig,
) -> dict:
    """Repeat: draw a member subset, evaluate every strategy on subset vs the
    full nonmember pool.  The same subset indices serve all strategies within
    a repeat; stds are population stds over repeats.
    """
    if set(member_scores) != set(nonmember_scores):
        raise ConfigError("member and nonmember score tables list different strategies")
    if not member_scores:
        return {}
    sizes_m = {len(np.ravel(v)) for v in member_scores.values()}
    sizes_n = {len(np.ravel(v)) for v in nonmember_scores.values()}
    if len(sizes_m) != 1 or len(sizes_n) != 1:
        raise ConfigError("per-strategy score pools differ in length")
    if sizes_m != {protocol.member_pool_size} or sizes_n != {protocol.nonmember_pool_size}:
        raise ConfigError("score pools do not match the protocol pool sizes")
    subset = protocol.resolved_subset_size()
    results = {
        name: StrategyRepeats(
            np.zeros(protocol.repeats), np.zeros(protocol.repeats), []
        )
        for name in member_scores
    }
    for r in range(protocol.repeats):
        rng = np.random.default_rng([protocol.seed, r])
        idx = rng.choice(protocol.member_pool_size, size=subset, replace=False)
        for name in sorted(member_scores):
            pool_m = np.ravel(member_scores[name])[idx]
            sset = LabeledScoreSet.from_pools(pool_m, nonmember_scores[name], name)
            results[name].aurocs[r] = auroc(sset)
            _, acc = best_threshold_accuracy(sset)
            results[name].accuracies[r] = acc
            results[name].curves.append(roc_curve(sset))
    return results


def ratio_robustness_experiment(
    member_scores,
    nonmember_scores,
    ratios=((5, 1), (1, 1), (1, 5)),
    repeats: int = 20,
    seed: int = 0,
) -> dict:
    """Mean AUROC at several member:nonmember ratios for one strategy.

    Nonmembers stay fixed; the member side is subsampled to round(a/b * n)
    per ratio a:b and averaged over seeded draws.  A ratio that needs more
    members than the pool holds raises ConfigError.
    """
    ms = np.asarray(member_scores, dtype=np.float64).ravel()
    ns = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if ms.size == 0 or ns.size == 0:
        raise EvaluationError("ratio experiment needs both pools non-empty")
    if repeats < 1:
        raise ConfigError("ratio repeats must be >= 1")
    out = {}
    for a, b in ratios:
        if a < 1 or b < 1:
            raise ConfigError(f"ratio parts must be >= 1, got {a}:{b}")
        need = int(round(ns.size * a / b))
        if need < 1:
            raise ConfigError(f"ratio {a}:{b} leaves no members")
        if need > ms.size:
            raise ConfigError(
                f"ratio {a}:{b} needs {need} members but the pool has {ms.size}"
            )
        key = f"{a}:{b}"
        if need == ms.size:
            out[key] = auroc(LabeledScoreSet.from_pools(ms, ns))
            continue
        vals = np.zeros(repeats)
        for r in range(repeats):
            rng = np.random.default_rng([seed, a, b, r])
            sub = ms[rng.choice(ms.size, size=need, replace=False)]
            vals[r] = auroc(LabeledScoreSet.from_pools(sub, ns))
        out[key] = float(vals.mean())
    return out


@dataclass(frozen=True)
class HistogramResult:
    edges: np.ndarray
    member_counts: np.ndarray
    nonmember_counts: np.ndarray


def score_histogram(score_set: LabeledScoreSet, n_bins: int, value_range) -> HistogramResult:
    """Fixed-range histograms per class; out-of-range values land in the
    first or last bin."""
    if n_bins < 1:
        raise ConfigError("histogram needs at least one bin")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ConfigError("histogram range must be finite with lo < hi")
    edges = np.linspace(lo, hi, n_bins + 1)
    clipped = np.clip(score_set.scores, lo, hi)
    m = score_set.is_member
    mc, _ = np.histogram(clipped[m], bins=edges)
    nc, _ = np.histogram(clipped[~m], bins=edges)
    return HistogramResult(edges, mc.astype(np.int64), nc.astype(np.int64))


@dataclass
class EvalReport:
    """Everything the pipeline publishes: the JSON payload plus side tables
    (ROC grids, histograms, score records) written as CSV files."""

    schema_version: int
    seed: int
    config_echo: dict
    dataset: dict
    target: dict
    splits: dict
    strategies: dict
    roc_grids: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    score_records: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config_echo,
            "dataset": self.dataset,
            "target": self.target,
            "splits": self.splits,
            "strategies": self.strategies,
        }
