"""Binary classification metrics."""

from __future__ import annotations

import numpy as np


def accuracy(labels, logits) -> float:
  """Fraction of examples where ``logit > 0`` agrees with ``label == 1``."""
  labels = np.asarray(labels)
  logits = np.asarray(logits)
  if labels.shape != logits.shape or labels.size == 0:
    raise ValueError("labels and scores must be non-empty and aligned")
  return float(np.mean((logits > 0) == (labels == 1)))


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray]:
  """False and true positive rates at every unique score threshold.

  Points are ordered by decreasing threshold and start at ``(0, 0)``.
  """
  labels = np.asarray(labels) == 1
  scores = np.asarray(scores, dtype=np.float64)
  n_pos = labels.sum()
  n_neg = labels.size - n_pos
  if n_pos == 0 or n_neg == 0:
    raise ValueError("ROC needs both classes")
  order = np.argsort(-scores, kind="stable")
  s, y = scores[order], labels[order]
  # Last position of each run of equal scores.
  ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
  tp = np.cumsum(y)[ends]
  fp = (ends + 1) - tp
  return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def auc(labels, scores) -> float:
  """Area under the ROC curve by the trapezoidal rule."""
  fpr, tpr = roc_curve(labels, scores)
  return float(np.trapezoid(tpr, fpr))
