"""
Evaluation of anomaly scores against point labels: AUC-ROC, AUC-PR, precision / recall / F1, point adjustment
and the best-F1 threshold search.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np
from sklearn.metrics import average_precision_score, roc_auc_score


class UndefinedMetricError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class EvaluationResult:
    auc_roc: float
    auc_pr: float
    precision: float
    recall: float
    f1: float
    precision_adj: float
    recall_adj: float
    f1_adj: float
    threshold: float
    threshold_adj: float
    config_fingerprint: str = ''

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> EvaluationResult:
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def _as_binary(x: Sequence[int],
               name: str
               ) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f'{name} is expected to be a vector, but got {x.shape=}.')
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f'{name} must be binary.')
    return x.astype(np.int64)


def _check_inputs(scores: Sequence[float],
                  labels: Sequence[int]
                  ) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _as_binary(labels, 'labels')
    if scores.shape != labels.shape:
        raise LengthMismatchError(f'One score per label is expected, but got {scores.shape=}, {labels.shape=}.')
    if not np.isfinite(scores).all():
        raise UndefinedMetricError(f'{int((~np.isfinite(scores)).sum())} scores are not finite.')
    return scores, labels


def _check_both_classes(labels: np.ndarray) -> None:
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise UndefinedMetricError(f'Both classes must be present, but got {labels.sum()} positives '
                                   f'out of {len(labels)}.')


def auc_roc(scores: Sequence[float],
            labels: Sequence[int]
            ) -> float:
    """ Probability that a random positive outranks a random negative; ties count one half.
    """
    scores, labels = _check_inputs(scores, labels)
    _check_both_classes(labels)
    return float(roc_auc_score(labels, scores))


def auc_pr(scores: Sequence[float],
           labels: Sequence[int]
           ) -> float:
    """ Average precision: sum over thresholds of (R_k - R_k-1) P_k.
    """
    scores, labels = _check_inputs(scores, labels)
    if labels.sum() == 0:
        raise UndefinedMetricError('AUC-PR needs at least one positive label.')
    return float(average_precision_score(labels, scores))


def confusion(preds: Sequence[int],
              labels: Sequence[int]
              ) -> ConfusionCounts:
    preds, labels = _as_binary(preds, 'preds'), _as_binary(labels, 'labels')
    if preds.shape != labels.shape:
        raise LengthMismatchError(f'{preds.shape=} != {labels.shape=}.')
    tp = int((preds & labels).sum())
    fp = int((preds & (1 - labels)).sum())
    fn = int(((1 - preds) & labels).sum())
    return ConfusionCounts(tp, fp, fn, len(labels) - tp - fp - fn)


def precision_recall_f1(c: ConfusionCounts
                        ) -> Tuple[float, float, float]:
    """ Precision = TP / (TP + FP), Recall = TP / (TP + FN), F1 = 2 P R / (P + R); 0 when undefined.
    """
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def label_segments(labels: Sequence[int]
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """ Start and end (exclusive) of every maximal run of 1s.
    """
    padded = np.concatenate([[0], np.asarray(labels, dtype=np.int64), [0]])
    edges = np.diff(padded)
    return np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)


def point_adjust(preds: Sequence[int],
                 labels: Sequence[int]
                 ) -> np.ndarray:
    """ Mark a whole anomalous segment as detected if any of its points is predicted positive.
    """
    preds, labels = _as_binary(preds, 'preds'), _as_binary(labels, 'labels')
    if preds.shape != labels.shape:
        raise LengthMismatchError(f'{preds.shape=} != {labels.shape=}.')
    adjusted = preds.copy()
    starts, ends = label_segments(labels)
    hits = np.concatenate([[0], np.cumsum(preds)])
    for start, end in zip(starts, ends):
        if hits[end] > hits[start]:
            adjusted[start:end] = 1
    return adjusted


def _f1_curve(tp: np.ndarray,
              fp: np.ndarray,
              n_pos: int
              ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with np.errstate(divide='ignore', invalid='ignore'):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = tp / n_pos
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def _threshold_counts(scores: np.ndarray,
                      labels: np.ndarray,
                      adjusted: bool
                      ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # candidate thresholds (unique scores ascending, then +inf) with TP and FP of preds = scores >= threshold
    thresholds = np.append(np.unique(scores), np.inf)
    order = np.argsort(scores, kind='stable')
    sorted_scores = scores[order]
    n_pos = int(labels.sum())
    above = len(scores) - np.searchsorted(sorted_scores, thresholds, side='left')
    cum_pos = np.concatenate([[0], np.cumsum(labels[order])])
    tp = n_pos - cum_pos[len(scores) - above]
    fp = above - tp
    if adjusted:
        # a segment counts in full once its maximum score reaches the threshold; FPs are unchanged
        starts, ends = label_segments(labels)
        seg_max = np.array([scores[s:e].max() for s, e in zip(starts, ends)])
        seg_len = (ends - starts).astype(np.int64)
        seg_order = np.argsort(seg_max, kind='stable')
        cum_len = np.concatenate([[0], np.cumsum(seg_len[seg_order])])
        below = np.searchsorted(seg_max[seg_order], thresholds, side='left')
        tp = n_pos - cum_len[below]
    return thresholds, tp, fp


def _best_f1(scores: np.ndarray,
             labels: np.ndarray,
             adjusted: bool
             ) -> Tuple[float, float, float, float]:
    thresholds, tp, fp = _threshold_counts(scores, labels, adjusted)
    precision, recall, f1 = _f1_curve(tp, fp, int(labels.sum()))
    # ties go to the larger threshold
    best = len(f1) - 1 - int(np.argmax(f1[::-1]))
    return float(thresholds[best]), float(precision[best]), float(recall[best]), float(f1[best])


def best_f1_threshold(scores: Sequence[float],
                      labels: Sequence[int],
                      adjusted: bool = False
                      ) -> Tuple[float, EvaluationResult]:
    """ Threshold theta maximizing F1 of preds = scores >= theta, searched over every unique score and +inf.

    Args:
        scores: anomaly scores
        labels: binary labels
        adjusted: maximize the F1 of point-adjusted predictions

    Returns: theta, and all metrics with both raw and adjusted counts taken at theta

    """
    scores, labels = _check_inputs(scores, labels)
    _check_both_classes(labels)
    threshold = _best_f1(scores, labels, adjusted)[0]
    preds = (scores >= threshold).astype(np.int64)
    raw = precision_recall_f1(confusion(preds, labels))
    adj = precision_recall_f1(confusion(point_adjust(preds, labels), labels))
    return threshold, EvaluationResult(auc_roc(scores, labels), auc_pr(scores, labels), *raw, *adj,
                                       threshold=threshold, threshold_adj=threshold)


def evaluate(scores: Sequence[float],
             labels: Sequence[int],
             fingerprint: str = ''
             ) -> EvaluationResult:
    """ AUC-ROC, AUC-PR and the best raw and best point-adjusted F1, each at its own threshold.
    """
    scores, labels = _check_inputs(scores, labels)
    _check_both_classes(labels)
    threshold, precision, recall, f1 = _best_f1(scores, labels, adjusted=False)
    threshold_adj, precision_adj, recall_adj, f1_adj = _best_f1(scores, labels, adjusted=True)
    return EvaluationResult(auc_roc(scores, labels), auc_pr(scores, labels),
                            precision, recall, f1, precision_adj, recall_adj, f1_adj,
                            threshold, threshold_adj, fingerprint)


def average_results(results: List[EvaluationResult],
                    fingerprint: str = ''
                    ) -> EvaluationResult:
    """ Mean of every metric over results, e.g. over the clients of an isolated run.
    """
    if not results:
        raise UndefinedMetricError('Nothing to average.')
    numeric = [f.name for f in fields(EvaluationResult) if f.name != 'config_fingerprint']
    means = {name: float(np.mean([getattr(r, name) for r in results])) for name in numeric}
    return EvaluationResult(**means, config_fingerprint=fingerprint)
