"""Sliding-window inference and learned per-class score aggregation.

A keyframe's proposals are fixed once; the model is re-run on short
windows slid across the long clip, and the per-window action scores are
fused per class. The weighted-sum strategy uses trainable weights (one
per window offset and class); max, average and top-k pooling are
expressed through the same summation kernel so their documented
equalities hold bit-for-bit.

Phase-2 training ("long-term") freezes the relation model entirely: the
per-window scores become constants, and only the aggregation weights
receive gradient. The fused score enters the focal classification loss
through the logit slot, which keeps the objective smooth for any real
weight values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .errors import ConfigError, ContractError
from .matching import LossConfig, match, set_loss
from .synthdata import ClipSample, ground_truth_set, window_grid

log = logging.getLogger(__name__)

STRATEGIES = ("weighted", "max", "avg", "topk")


@dataclass(frozen=True)
class WindowingConfig:
    """Short-window and long-span geometry in seconds."""

    t_before: float = 1.05  # T_p
    t_after: float = 1.05  # T_f
    long_before: float = 6.0  # L_p
    long_after: float = 6.0  # L_f
    stride: float = 1.0  # W

    def __post_init__(self):
        if self.stride <= 0:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.long_before < 0 or self.long_after < 0:
            raise ConfigError("long spans must be nonnegative")

    @property
    def offsets(self) -> list[int]:
        return list(
            range(-math.floor(self.long_before / self.stride),
                  math.floor(self.long_after / self.stride) + 1)
        )

    @property
    def num_windows(self) -> int:
        return len(self.offsets)

    @classmethod
    def short_term(cls, t_before: float = 1.05, t_after: float = 1.05) -> "WindowingConfig":
        return cls(t_before, t_after, 0.0, 0.0)

    @classmethod
    def from_support(cls, support_seconds: float, t_before: float = 1.05,
                     t_after: float = 1.05, stride: float = 1.0) -> "WindowingConfig":
        """Total temporal support -> symmetric long spans around the keyframe."""
        span = max(0.0, (support_seconds - t_before - t_after) / 2.0)
        return cls(t_before, t_after, span, span, stride)


@dataclass
class AggregationWeights:
    """One fusion weight per (window offset, action class)."""

    offsets: tuple[int, ...]
    weights: np.ndarray  # (num_windows, num_classes)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape[0] != len(self.offsets):
            raise ContractError("one weight row per window offset required")

    @classmethod
    def initial(cls, cfg: WindowingConfig, num_classes: int) -> "AggregationWeights":
        """One-hot at offset 0: fused output starts at exact short-term behavior."""
        offsets = tuple(cfg.offsets)
        w = np.zeros((len(offsets), num_classes))
        w[offsets.index(0)] = 1.0
        return cls(offsets, w)


def windows(cfg: WindowingConfig, keyframe_time: float) -> list[tuple[int, tuple[float, float]]]:
    """(offset index, absolute clip interval) per window, ascending."""
    out = []
    for n in cfg.offsets:
        center = keyframe_time + cfg.stride * n
        out.append((n, (center - cfg.t_before, center + cfg.t_after)))
    return out


@dataclass
class WindowedScores:
    """Per-window action scores for one clip's fixed proposal set."""

    clip: ClipSample
    offsets: tuple[int, ...]
    scores: np.ndarray  # (num_windows, num_classes, K) post-sigmoid


def run_windowed(
    params: mdl.ModelParams,
    cfg: mdl.ModelConfig,
    clip: ClipSample,
    windowing: WindowingConfig,
    grid_t: int,
    rng=None,
) -> WindowedScores:
    """Inference over every window; boxes and proposals stay the keyframe's."""
    from .rng import RngStream

    rng = rng or RngStream(0)
    per_window = []
    with ad.no_grad():
        for n, interval in windows(windowing, clip.keyframe_time):
            grid = window_grid(clip, interval, grid_t)
            logits = mdl.forward_actions(params, cfg, clip.proposals, grid, rng, training=False)
            per_window.append(ad._sigmoid(logits.data))
    return WindowedScores(clip, tuple(windowing.offsets), np.stack(per_window))


def _strategy_weights(scores: np.ndarray, strategy: str, weights: AggregationWeights | None,
                      k: int) -> np.ndarray:
    """Per-(window, class, proposal) weights realizing each strategy."""
    n_win = scores.shape[0]
    if strategy == "weighted":
        if weights is None:
            raise ContractError("weighted aggregation requires AggregationWeights")
        if weights.weights.shape != (n_win, scores.shape[1]):
            raise ContractError(
                f"weights shape {weights.weights.shape} vs scores {scores.shape[:2]}"
            )
        return np.broadcast_to(weights.weights[:, :, None], scores.shape).copy()
    if strategy == "avg":
        k = n_win
        strategy = "topk"
    if strategy == "max":
        k = 1
        strategy = "topk"
    if strategy != "topk":
        raise ConfigError(f"unknown aggregation strategy {strategy!r}")
    k = min(max(int(k), 1), n_win)
    # indicator/k on the k largest values per (class, proposal) column
    order = np.argsort(-scores, axis=0, kind="stable")
    w = np.zeros_like(scores)
    rows = order[:k]
    cls_ix, prop_ix = np.meshgrid(
        np.arange(scores.shape[1]), np.arange(scores.shape[2]), indexing="ij"
    )
    for r in rows:
        w[r, cls_ix, prop_ix] = 1.0 / k
    return w


def aggregate(
    windowed: WindowedScores,
    weights: AggregationWeights | None = None,
    strategy: str = "weighted",
    topk: int = 1,
) -> np.ndarray:
    """Fuse per-window scores into one (num_classes, K) score matrix.

    All strategies run through one weighted summation kernel, so avg
    equals topk(num_windows), max equals topk(1), and weighted with
    uniform weights equals avg, exactly.
    """
    scores = windowed.scores
    if scores.shape[0] == 0:
        raise ContractError("cannot aggregate an empty window list")
    w = _strategy_weights(scores, strategy, weights, topk)
    return (w * scores).sum(axis=0)


def aggregation_logits(
    weight_param: ad.Parameter, scores: np.ndarray
) -> ad.Tensor:
    """Tape expression of the fused scores, (num_classes, K), for training.

    scores (num_windows, num_classes, K) are constants; gradient flows
    only into the weight parameter.
    """
    n_win, n_cls, k = scores.shape
    rows = []
    for n in range(n_win):
        w_row = ad.reshape(ad.narrow(weight_param.value, 0, n, n + 1), (n_cls,))
        s_n = ad.Tensor(scores[n].T)  # (K, num_classes)
        rows.append(ad.mul_rowvec(s_n, w_row))
    total = rows[0]
    for r in rows[1:]:
        total = ad.add(total, r)
    return ad.transpose(total)  # (num_classes, K)


def aggregation_loss(
    weight_param: ad.Parameter,
    clips_scores: list[WindowedScores],
    sigmas: list,
    gt_sets: list,
    loss_cfg: LossConfig,
) -> ad.Tensor:
    """Mean per-clip set loss of the fused scores, differentiable in the weights."""
    total = None
    for ws, sigma, gts in zip(clips_scores, sigmas, gt_sets):
        fused = aggregation_logits(weight_param, ws.scores)
        loss = set_loss(gts, fused, sigma, loss_cfg)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(clips_scores))


def precompute_windowed(
    params: mdl.ModelParams,
    cfg: mdl.ModelConfig,
    clips: list[ClipSample],
    windowing: WindowingConfig,
    grid_t: int,
    loss_cfg: LossConfig,
):
    """Frozen-model pass: per-clip window scores, matches, and padded truth."""
    all_scores, sigmas, gt_sets = [], [], []
    for clip in clips:
        ws = run_windowed(params, cfg, clip, windowing, grid_t)
        keyframe_ix = ws.offsets.index(0)
        preds = mdl.predictions_from_logits(
            clip.proposals, _logits_from_scores(ws.scores[keyframe_ix])
        )
        gts = ground_truth_set(clip, len(clip.proposals))
        sigma = match(gts, preds, loss_cfg).sigma
        all_scores.append(ws)
        sigmas.append(sigma)
        gt_sets.append(gts)
    return all_scores, sigmas, gt_sets


def _logits_from_scores(scores: np.ndarray) -> np.ndarray:
    p = np.clip(scores, 1e-9, 1.0 - 1e-9)
    return np.log(p / (1.0 - p))


def train_aggregation(
    params: mdl.ModelParams,
    cfg: mdl.ModelConfig,
    clips: list[ClipSample],
    windowing: WindowingConfig,
    grid_t: int,
    loss_cfg: LossConfig,
    lr: float = 1e-2,
    epochs: int = 150,
    weight_decay: float = 0.0,
) -> AggregationWeights:
    """Fit aggregation weights with the relation model frozen.

    The model parameters are hashed before and after; any drift is a
    contract violation. Window scores are precomputed once since the
    frozen model makes them constants.
    """
    from .checkpoint import params_hash
    from .training import AdamW

    before = params_hash({p.name: p.value.data for p in params.parameters()})
    scores, sigmas, gt_sets = precompute_windowed(
        params, cfg, clips, windowing, grid_t, loss_cfg
    )
    init = AggregationWeights.initial(windowing, cfg.num_classes)
    weight_param = ad.Parameter("aggregation.weights", init.weights)
    opt = AdamW([weight_param], lr=lr, weight_decay=weight_decay)
    for _epoch in range(epochs):
        weight_param.zero_grad()
        ad.backward(aggregation_loss(weight_param, scores, sigmas, gt_sets, loss_cfg))
        opt.step()
    after = params_hash({p.name: p.value.data for p in params.parameters()})
    if before != after:
        raise ContractError("relation model parameters changed during aggregation training")
    return AggregationWeights(tuple(windowing.offsets), weight_param.value.data.copy())
