"""Evaluation and statistics: stratified k-fold CV, confusion/accuracy,
ROC/AUC (trapezoid + rank-based oracle), mean±std reporting, pooled t-test
and one-way ANOVA with exact p-values via the regularized incomplete beta.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    AD,
    CN,
    FitStats,
    InstanceRecord,
    SubjectRecord,
    build_samples,
    cdr_to_label,
    split_subjects,
)
from .model import ModelConfig, init_params
from .train import Prediction, TrainConfig, predict, train


class DegenerateVarianceError(ValueError):
    """Zero variance with unequal means: the test statistic is undefined."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass
class FoldReport:
    fold_index: int
    accuracy: float
    auc: float
    confusion: ConfusionMatrix
    roc: list
    predictions: list


# ---------------------------------------------------------------------------
# folds


def stratified_kfold(subject_ids: Sequence[str], labels: dict, k: int,
                     rng: np.random.Generator) -> list:
    """k folds of subject ids, class-balanced within one subject per fold."""
    if k < 2:
        raise ValueError(f"k={k} is degenerate; need k >= 2")
    by_class: dict[int, list[str]] = {}
    for sid in sorted(subject_ids):
        by_class.setdefault(labels[sid], []).append(sid)
    for label, group in sorted(by_class.items()):
        if len(group) < k:
            raise ValueError(
                f"class {label} has {len(group)} subjects, fewer than k={k}")
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        for i in order:
            folds[cursor % k].append(group[int(i)])
            cursor += 1
    return folds


# ---------------------------------------------------------------------------
# classification metrics


def confusion(predictions: Sequence[Prediction]) -> ConfusionMatrix:
    """Counts with AD as the positive class."""
    if not predictions:
        raise ValueError("no predictions to score")
    tp = fp = tn = fn = 0
    for p in predictions:
        if p.predicted == AD and p.label == AD:
            tp += 1
        elif p.predicted == AD and p.label == CN:
            fp += 1
        elif p.predicted == CN and p.label == CN:
            tn += 1
        else:
            fn += 1
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / cm.total


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> list:
    """Threshold sweep over distinct scores, descending, with sentinels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == AD).sum())
    n_neg = int((labels == CN).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [RocPoint(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < len(order):
        thr = scores[order[i]]
        while i < len(order) and scores[order[i]] == thr:
            if labels[order[i]] == AD:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append(RocPoint(fp / n_neg, tp / n_pos, float(thr)))
    return points


def auc_trapezoid(points: Sequence[RocPoint]) -> float:
    total = 0.0
    for a, b in zip(points[:-1], points[1:]):
        total += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return total


def auc_mannwhitney(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic AUC: (#{pos>neg} + 0.5 #{ties}) / (n_pos n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = scores[labels == AD]
    neg = scores[labels == CN]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes present")
    wins = ties = 0
    for p in pos:
        wins += int((p > neg).sum())
        ties += int((p == neg).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def mean_std(values: Sequence[float]):
    """Mean and sample (n-1) standard deviation; std is 0 for n=1."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("mean_std of an empty sequence")
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return mean, std


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


# ---------------------------------------------------------------------------
# special function and hypothesis tests


def reg_incomplete_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta I_x(a, b) by continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if a <= 0.0 or b <= 0.0:
        raise ValueError(f"a={a}, b={b} must be positive")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def _beta_continued_fraction(a: float, b: float, x: float,
                             max_iter: int = 300, eps: float = 1e-15) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(
        f"incomplete beta continued fraction did not converge (a={a}, b={b})")


def t_test(a: Sequence[float], b: Sequence[float]):
    """Pooled-variance two-sample Student t; two-sided p."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    df = a.size + b.size - 2
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / df
    diff = a.mean() - b.mean()
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0, df, 1.0
        raise DegenerateVarianceError(
            "zero pooled variance with unequal means")
    t = diff / math.sqrt(pooled * (1.0 / a.size + 1.0 / b.size))
    p = reg_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
    return float(t), df, float(p)


def one_way_anova(groups: Sequence[Sequence[float]]):
    """One-way fixed-effects ANOVA; p from the F distribution."""
    if len(groups) < 2:
        raise ValueError("ANOVA needs at least 2 groups")
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if any(g.size < 2 for g in arrays):
        raise ValueError("each group needs at least 2 values")
    n_total = sum(g.size for g in arrays)
    k = len(arrays)
    grand = sum(g.sum() for g in arrays) / n_total
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    df_between = k - 1
    df_within = n_total - k
    if ss_within == 0.0:
        if ss_between == 0.0:
            return 0.0, df_between, df_within, 1.0
        return math.inf, df_between, df_within, 0.0
    f = (ss_between / df_between) / (ss_within / df_within)
    x = df_between * f / (df_between * f + df_within)
    p = 1.0 - reg_incomplete_beta(x, df_between / 2.0, df_within / 2.0)
    return float(f), df_between, df_within, float(p)


# ---------------------------------------------------------------------------
# cross-validation driver


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def evaluate_fold(predictions: Sequence[Prediction],
                  fold_index: int) -> FoldReport:
    cm = confusion(predictions)
    scores = [p.p_ad for p in predictions]
    labels = [p.label for p in predictions]
    roc = roc_points(scores, labels)
    return FoldReport(fold_index=fold_index, accuracy=accuracy(cm),
                      auc=auc_trapezoid(roc), confusion=cm, roc=roc,
                      predictions=list(predictions))


def cv_run(records: Sequence[SubjectRecord],
           instances: Sequence[InstanceRecord], rois: Sequence[str],
           model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 7,
           seed: int = 0, holdout_test: bool = True, jobs: int = 1,
           val_fraction: float = 0.2):
    """k-fold CV over pooled train+validation subjects (test split held out).

    Each fold trains on the other k-1 folds, with an inner ``val_fraction``
    carve for checkpoint selection, and is scored on the held-out fold.
    Returns the fold reports and a mean±std summary.
    """
    if holdout_test:
        tr, va, _te = split_subjects(records, (0.70, 0.15, 0.15),
                                     np.random.default_rng([seed, 11]))
        pool = tr + va
    else:
        pool = list(records)
    by_id = {r.subject_id: r for r in pool}
    labels = {r.subject_id: cdr_to_label(r.cdr) for r in pool}
    folds = stratified_kfold(list(by_id), labels, k,
                             np.random.default_rng([seed, 23]))

    def run_fold(fold_index: int) -> FoldReport:
        held_ids = set(folds[fold_index])
        train_records = [r for r in pool if r.subject_id not in held_ids]
        held_records = [by_id[sid] for sid in folds[fold_index]]
        fold_seed = _derive_seed(seed, 31, fold_index)
        inner_train, inner_val, _ = split_subjects(
            train_records, (1.0 - val_fraction, val_fraction, 0.0),
            np.random.default_rng([seed, 47, fold_index]))
        fit = FitStats.from_records(inner_train)
        size = tuple(model_cfg.image_dims[1:3])
        channels = model_cfg.image_dims[3]
        s_train = build_samples(inner_train, instances, rois, fit, size, channels)
        s_val = build_samples(inner_val, instances, rois, fit, size, channels)
        s_held = build_samples(held_records, instances, rois, fit, size, channels)
        params = init_params(model_cfg, fold_seed)
        fold_train_cfg = dataclasses.replace(train_cfg, seed=fold_seed)
        best_params, _history = train(model_cfg, params, s_train, s_val,
                                      fold_train_cfg)
        preds = predict(model_cfg, best_params, s_held,
                        fold_train_cfg.batch_size)
        return evaluate_fold(preds, fold_index)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            reports = list(pool_exec.map(run_fold, range(k)))
    else:
        reports = [run_fold(i) for i in range(k)]
    reports.sort(key=lambda r: r.fold_index)
    return reports, summarize(reports)


def summarize(reports: Sequence[FoldReport]) -> dict:
    acc_mean, acc_std = mean_std([r.accuracy for r in reports])
    auc_mean, auc_std = mean_std([r.auc for r in reports])
    return {"accuracy_mean": acc_mean, "accuracy_std": acc_std,
            "auc_mean": auc_mean, "auc_std": auc_std}


def summary_line(summary: dict) -> str:
    """Accuracy rendered on the 0-100 scale, AUC on its native scale."""
    acc = format_mean_std(summary["accuracy_mean"] * 100.0,
                          summary["accuracy_std"] * 100.0)
    auc = format_mean_std(summary["auc_mean"], summary["auc_std"])
    return f"accuracy {acc} | auc {auc}"


def metrics_payload(reports: Sequence[FoldReport]) -> dict:
    return {
        "folds": [{
            "fold": r.fold_index,
            "accuracy": r.accuracy,
            "auc": r.auc,
            "confusion": {"tp": r.confusion.tp, "fp": r.confusion.fp,
                          "tn": r.confusion.tn, "fn": r.confusion.fn},
        } for r in reports],
        "summary": summarize(reports),
    }


def save_metrics(reports: Sequence[FoldReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics_payload(reports), fh, sort_keys=True, indent=2)
        fh.write("\n")


def save_roc_csv(points: Sequence[RocPoint], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr,threshold\n")
        for p in points:
            fh.write(f"{p.fpr!r},{p.tpr!r},{p.threshold!r}\n")
