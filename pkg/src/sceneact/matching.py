"""Set matching between padded ground truth and the K predictions.

The matching cost per (target, prediction) pair combines a sigmoid focal
term on the detector confidence with L1 and generalized-IoU box terms;
padding targets cost zero against every prediction. The optimal
assignment is found by an O(K^3) shortest-augmenting-path solver. The
training loss sums the focal classification loss over matched action
label vectors, where padding targets contribute all-negative labels.

Only action logits carry gradient: the match itself is computed on plain
floats and is a constant with respect to differentiation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .boxes import BoundingBox, box_l1, giou
from .errors import ContractError, ValidationError

log = logging.getLogger(__name__)

COST_MODES = ("person", "action", "both")

_H_CLIP = 1e-6


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    cost_mode: str = "person"

    def __post_init__(self):
        if not (0.0 < self.focal_alpha < 1.0):
            raise ValidationError(f"focal_alpha must lie in (0,1), got {self.focal_alpha}")
        if self.focal_gamma < 0.0:
            raise ValidationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.lambda_l1 < 0.0 or self.lambda_giou < 0.0:
            raise ValidationError("lambda weights must be nonnegative")
        if self.cost_mode not in COST_MODES:
            raise ValidationError(f"cost_mode must be one of {COST_MODES}")


@dataclass
class GroundTruthSet:
    """Targets padded to K entries; the first ``count`` are real."""

    boxes: list[BoundingBox]
    labels: np.ndarray  # (count, num_classes) 0/1
    total: int  # K

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim != 2:
            raise ContractError(f"labels must be 2-D (count, classes), got {self.labels.shape}")
        if len(self.boxes) != self.labels.shape[0]:
            raise ContractError("ground truth boxes and labels disagree in length")
        if self.count > self.total:
            raise ContractError(f"{self.count} targets exceed capacity {self.total}")

    @property
    def count(self) -> int:
        return len(self.boxes)

    def is_real(self, i: int) -> bool:
        return i < self.count

    @classmethod
    def build(cls, boxes, labels, total: int) -> "GroundTruthSet":
        """Pad (or clip by descending box area, with a warning) to ``total``."""
        labels = np.asarray(labels, dtype=np.float64)
        if len(boxes) > total:
            log.warning(
                "clipping %d ground-truth actors to the %d largest", len(boxes), total
            )
            order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].area, i))[:total]
            boxes = [boxes[i] for i in order]
            labels = labels[order]
        return cls(list(boxes), labels, total)


@dataclass(frozen=True)
class MatchResult:
    sigma: tuple  # sigma[i] = prediction index assigned to target i
    total_cost: float


def focal_loss(logit: float, target: int, cfg: LossConfig) -> float:
    """Scalar sigmoid focal loss; stable at extreme logits."""
    x = float(logit)
    sp_neg = math.log1p(math.exp(-abs(x))) + max(-x, 0.0)  # softplus(-x)
    sp_pos = math.log1p(math.exp(-abs(x))) + max(x, 0.0)  # softplus(x)
    p = 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
    if target:
        return cfg.focal_alpha * (1.0 - p) ** cfg.focal_gamma * sp_neg
    return (1.0 - cfg.focal_alpha) * p ** cfg.focal_gamma * sp_pos


def _logit(prob: float) -> float:
    p = min(max(prob, _H_CLIP), 1.0 - _H_CLIP)
    return math.log(p / (1.0 - p))


def pair_cost(
    gt_box: BoundingBox | None,
    gt_labels: np.ndarray | None,
    pred_box: BoundingBox,
    person_score: float,
    action_logits: np.ndarray | None,
    cfg: LossConfig,
) -> float:
    """Matching cost of one target against one prediction.

    A padding target (gt_box None) costs zero. The detector confidence
    enters the focal term as a logit (inverse sigmoid of the clamped
    probability) so a single focal implementation serves everywhere.
    """
    if gt_box is None:
        return 0.0
    cost = cfg.lambda_l1 * box_l1(gt_box, pred_box) + cfg.lambda_giou * (
        1.0 - giou(gt_box, pred_box)
    )
    if cfg.cost_mode in ("person", "both"):
        cost += focal_loss(_logit(person_score), 1, cfg)
    if cfg.cost_mode in ("action", "both"):
        if action_logits is None or gt_labels is None:
            raise ContractError("action cost mode requires action logits and labels")
        for k in range(len(gt_labels)):
            cost += focal_loss(float(action_logits[k]), int(gt_labels[k]), cfg)
    return cost


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost perfect assignment on a square matrix.

    Shortest-augmenting-path formulation with row/column potentials,
    O(n^3); handles arbitrary finite entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_row = [0] * (n + 1)  # column j -> assigned row (1-based), 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    sigma = [0] * n
    for j in range(1, n + 1):
        sigma[match_row[j] - 1] = j - 1
    total = float(sum(cost[i, sigma[i]] for i in range(n)))
    return MatchResult(tuple(sigma), total)


def match(gts: GroundTruthSet, preds, cfg: LossConfig) -> MatchResult:
    """Assign each padded target a distinct prediction, minimizing pair cost.

    ``preds`` carries boxes, person_scores and action_logits for K
    predictions (see PredictionSet). Padding rows are all-zero, so the
    reported total equals the cost over real targets.
    """
    k = gts.total
    if len(preds.boxes) != k:
        raise ContractError(
            f"prediction count {len(preds.boxes)} differs from target capacity {k}"
        )
    logits = np.asarray(preds.action_logits)
    cost = np.zeros((k, k))
    for i in range(gts.count):
        for j in range(k):
            cost[i, j] = pair_cost(
                gts.boxes[i],
                gts.labels[i],
                preds.boxes[j],
                float(preds.person_scores[j]),
                logits[:, j],
                cfg,
            )
    return hungarian(cost)


def target_matrix(gts: GroundTruthSet, sigma) -> np.ndarray:
    """(K, num_classes) label matrix aligned to predictions via sigma."""
    out = np.zeros((gts.total, gts.labels.shape[1]))
    for i in range(gts.count):
        out[sigma[i]] = gts.labels[i]
    return out


def set_loss(gts: GroundTruthSet, logits: ad.Tensor, sigma, cfg: LossConfig) -> ad.Tensor:
    """Focal classification loss over matched targets, as a tape scalar.

    ``logits`` is (num_classes, K). Padding targets contribute all-zero
    label vectors, i.e. pure negatives for every class.
    """
    k = gts.total
    if logits.shape[1] != k:
        raise ContractError(f"logits have {logits.shape[1]} columns, expected {k}")
    rows = ad.transpose(logits)  # (K, num_classes)
    ordered = ad.gather_rows(rows, list(sigma))  # row i = prediction sigma(i)
    targets = np.zeros((k, logits.shape[0]))
    for i in range(gts.count):
        targets[i] = gts.labels[i]
    return ad.reduce_sum(ad.focal_from_logits(ordered, targets, cfg.focal_alpha, cfg.focal_gamma))
