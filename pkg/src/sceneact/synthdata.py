"""Synthetic actor-world clips standing in for real detector and video backbones.

Each clip places a few ground-truth actors in the unit square and gives
every actor one body-pose action, optionally an object-interaction
action, and, when two actors stand close enough, a shared
pair-interaction action. Every action class owns a fixed random
orthonormal signature vector. A per-second feature timeline carries
Gaussian noise everywhere plus the signature of each active action in
one grid cell: the actor's own center cell for pose and object classes,
the midpoint cell between the two participants for pair classes. Actor
appearance features are class-agnostic by construction, so action
identity is only recoverable from the scene timeline.

The synthetic detector returns jittered ground-truth boxes with
calibrated confidences, drops actors at the false-negative rate and
fills free proposal slots with low-confidence false positives.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxes import BoundingBox, GeometryVector, geometry_vector, sanitize_box
from .errors import ConfigError, ContractError, ParseError, ValidationError
from .matching import GroundTruthSet
from .rng import RngStream

log = logging.getLogger(__name__)

CATEGORIES = ("pose", "person-person", "person-object")

DUMMY_BOX = BoundingBox(0.495, 0.495, 0.505, 0.505)


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the synthetic world; defaults give the standard benchmark."""

    seed: int = 0
    num_actors: tuple[int, int] = (1, 2)
    num_classes: int = 12
    actor_dim: int = 32  # detector feature length C
    scene_dim: int = 32  # scene token length C'
    grid_h: int = 8
    grid_w: int = 8
    grid_t: int = 4
    proposal_count: int = 10  # K
    box_jitter: float = 0.003
    false_positive_rate: float = 0.3
    false_negative_rate: float = 0.01
    confidence_calibration: float = 0.75  # lower bound of genuine-detection confidence
    signature_magnitude: float = 4.5
    scene_noise: float = 0.1
    momentary_fraction: float = 0.10
    momentary_span: tuple[float, float] = (0.6, 1.2)
    sustained_span: tuple[float, float] = (2.0, 7.0)
    object_probability: float = 0.7
    pair_probability: float = 0.7  # chance a two-actor clip forms a close pair
    pair_distance_max: float = 0.32
    min_separation: float = 0.25
    box_size_range: tuple[float, float] = (0.10, 0.20)
    appearance_prototypes: int = 8  # 0 draws each actor fresh
    appearance_noise: float = 0.0
    timeline_extent: float = 8.0  # seconds covered on each side of the keyframe
    train_clips: int = 200
    eval_clips: int = 50

    def __post_init__(self):
        for name in ("false_positive_rate", "false_negative_rate", "momentary_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("num_classes", "actor_dim", "scene_dim", "grid_h", "grid_w",
                     "grid_t", "proposal_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_classes % len(CATEGORIES) != 0:
            raise ConfigError(
                f"num_classes must split evenly over {len(CATEGORIES)} categories"
            )


@dataclass(frozen=True)
class ActorProposal:
    box: BoundingBox
    person_score: float
    feature: np.ndarray  # (C,)
    geometry: GeometryVector


@dataclass
class SceneContextGrid:
    """Flattened H x W x T feature tokens; order is t-major, then row, then column."""

    h: int
    w: int
    t: int
    features: np.ndarray  # (C', N) with N = h * w * t

    def __post_init__(self):
        n = self.h * self.w * self.t
        if self.features.shape[1] != n:
            raise ContractError(f"grid features have {self.features.shape[1]} tokens, expected {n}")

    def token_index(self, t: int, row: int, col: int) -> int:
        return (t * self.h + row) * self.w + col


@dataclass(frozen=True)
class ActionInstance:
    class_id: int
    actors: tuple[int, ...]  # one actor, or the pair sharing the action
    cells: tuple[tuple[int, int], ...]  # (row, col) cells carrying the signature
    start: float  # seconds relative to the keyframe
    end: float
    momentary: bool


@dataclass
class ClipTruth:
    boxes: list[BoundingBox]
    labels: np.ndarray  # (num_actors, num_classes)
    appearances: np.ndarray  # (num_actors, C)
    instances: list[ActionInstance]


@dataclass
class ClipSample:
    clip_id: str
    keyframe_time: float
    detections: list[ActorProposal]  # raw synthetic detector output
    proposals: list[ActorProposal]  # densely sampled, padded to K
    timeline_offsets: np.ndarray  # (S,) seconds relative to the keyframe
    timeline: np.ndarray  # (S, H, W, C')
    truth: ClipTruth
    time_offset: float = 0.0  # set by temporal augmentation


def class_category(class_id: int, num_classes: int) -> str:
    per = num_classes // len(CATEGORIES)
    return CATEGORIES[min(class_id // per, len(CATEGORIES) - 1)]


def class_name(class_id: int, num_classes: int) -> str:
    per = num_classes // len(CATEGORIES)
    stem = {"pose": "pose", "person-person": "pair", "person-object": "object"}
    return f"{stem[class_category(class_id, num_classes)]}_{class_id % per}"


def category_map(num_classes: int) -> dict[int, str]:
    return {k: class_category(k, num_classes) for k in range(num_classes)}


@functools.lru_cache(maxsize=8)
def signature_bank(seed: int, num_classes: int, scene_dim: int) -> np.ndarray:
    """Fixed orthonormal signature per class, derived from the dataset seed."""
    if num_classes > scene_dim:
        raise ConfigError("need scene_dim >= num_classes for orthonormal signatures")
    gen = RngStream(seed).child_named("signatures").generator()
    raw = gen.standard_normal((scene_dim, scene_dim))
    q, _ = np.linalg.qr(raw)
    return q[:, :num_classes].T.copy()  # (num_classes, C')


def dummy_proposal(actor_dim: int) -> ActorProposal:
    return ActorProposal(DUMMY_BOX, 0.0, np.zeros(actor_dim), geometry_vector(DUMMY_BOX))


def _round6(x: float) -> float:
    return round(float(x), 6)


def _sample_box(gen: np.random.Generator, size_range: tuple[float, float]) -> BoundingBox:
    cx = gen.uniform(0.15, 0.85)
    cy = gen.uniform(0.15, 0.85)
    w = gen.uniform(*size_range)
    h = gen.uniform(*size_range)
    box = sanitize_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return BoundingBox(*(_round6(c) for c in box.corners()))


@functools.lru_cache(maxsize=8)
def appearance_bank(seed: int, prototypes: int, actor_dim: int) -> np.ndarray:
    """Shared appearance prototypes; class-independent by construction."""
    gen = RngStream(seed).child_named("appearances").generator()
    bank = gen.standard_normal((prototypes, actor_dim))
    return bank / np.linalg.norm(bank, axis=1, keepdims=True)


def _cell_of(cfg: ScenarioConfig, x: float, y: float) -> tuple[int, int]:
    row = min(int(y * cfg.grid_h), cfg.grid_h - 1)
    col = min(int(x * cfg.grid_w), cfg.grid_w - 1)
    return row, col


def _cheb(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _place_actors(cfg: ScenarioConfig, gen: np.random.Generator):
    """Sample actor boxes with grid-aware spacing.

    Lone actors occupy center cells at Chebyshev distance >= 2 from every
    other actor, so one actor's immediate cell neighborhood never contains
    another actor's signatures. A close pair is placed so the two centers
    still sit >= 2 cells apart while the midpoint cell touches both
    neighborhoods, which is what makes the shared signature readable by
    both participants and by nobody else.
    """
    n_actors = int(gen.integers(cfg.num_actors[0], cfg.num_actors[1] + 1))
    want_pair = n_actors >= 2 and gen.random() < cfg.pair_probability

    boxes: list[BoundingBox] = []
    pairs: list[tuple[int, int]] = []

    def cells_ok(center, others):
        cell = _cell_of(cfg, *center)
        return all(_cheb(cell, _cell_of(cfg, *o.center)) >= 2 for o in others)

    if want_pair:
        for _attempt in range(500):
            a = _sample_box(gen, cfg.box_size_range)
            d = gen.uniform(cfg.min_separation, cfg.pair_distance_max)
            angle = gen.uniform(0.0, 2.0 * np.pi)
            cx = a.center[0] + d * np.cos(angle)
            cy = a.center[1] + d * np.sin(angle)
            if not (0.15 <= cx <= 0.85 and 0.15 <= cy <= 0.85):
                continue
            w = gen.uniform(*cfg.box_size_range)
            h = gen.uniform(*cfg.box_size_range)
            b = sanitize_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            b = BoundingBox(*(_round6(c) for c in b.corners()))
            ca, cb = _cell_of(cfg, *a.center), _cell_of(cfg, *b.center)
            mid = _cell_of(cfg, 0.5 * (a.center[0] + b.center[0]),
                           0.5 * (a.center[1] + b.center[1]))
            if _cheb(ca, cb) >= 2 and _cheb(mid, ca) <= 1 and _cheb(mid, cb) <= 1:
                boxes.extend([a, b])
                pairs.append((0, 1))
                break
        n_actors = max(n_actors, len(boxes))

    while len(boxes) < n_actors:
        for _attempt in range(200):
            box = _sample_box(gen, cfg.box_size_range)
            if cells_ok(box.center, boxes) and all(
                math.dist(box.center, b.center) >= cfg.min_separation for b in boxes
            ):
                boxes.append(box)
                break
        else:
            break  # crowded draw; settle for fewer actors
    return boxes, pairs


def _interval(cfg: ScenarioConfig, gen: np.random.Generator) -> tuple[float, float, bool]:
    momentary = gen.random() < cfg.momentary_fraction
    lo, hi = cfg.momentary_span if momentary else cfg.sustained_span
    before = gen.uniform(lo, hi)
    after = gen.uniform(lo, hi)
    return -before, after, momentary


def generate_clip(cfg: ScenarioConfig, rng: RngStream, clip_id: str = "clip",
                  keyframe_time: float = 0.0) -> ClipSample:
    """Deterministically build one clip from (config, stream)."""
    g_world = rng.child(0).generator()
    g_scene = rng.child(1).generator()
    g_det = rng.child(2).generator()
    signatures = signature_bank(cfg.seed, cfg.num_classes, cfg.scene_dim)
    per = cfg.num_classes // len(CATEGORIES)

    boxes, pairs = _place_actors(cfg, g_world)
    n_actors = len(boxes)

    labels = np.zeros((n_actors, cfg.num_classes))
    if cfg.appearance_prototypes > 0:
        bank = appearance_bank(cfg.seed, cfg.appearance_prototypes, cfg.actor_dim)
        picks = g_world.integers(0, cfg.appearance_prototypes, size=n_actors)
        appearances = bank[picks] + cfg.appearance_noise * g_world.standard_normal(
            (n_actors, cfg.actor_dim)
        )
    else:
        appearances = g_world.standard_normal((n_actors, cfg.actor_dim))
    appearances /= np.linalg.norm(appearances, axis=1, keepdims=True)
    instances: list[ActionInstance] = []

    def add_instance(class_id, actors, cells):
        start, end, momentary = _interval(cfg, g_world)
        instances.append(
            ActionInstance(class_id, tuple(actors), cells, start, end, momentary)
        )
        for a in actors:
            labels[a, class_id] = 1.0

    for i, box in enumerate(boxes):
        center_cell = _cell_of(cfg, *box.center)
        add_instance(int(g_world.integers(0, per)), (i,), (center_cell,))
        if g_world.random() < cfg.object_probability:
            add_instance(int(g_world.integers(2 * per, 3 * per)), (i,), (center_cell,))
    for i, j in pairs:
        ci, cj = boxes[i].center, boxes[j].center
        mid_cell = _cell_of(cfg, 0.5 * (ci[0] + cj[0]), 0.5 * (ci[1] + cj[1]))
        add_instance(int(g_world.integers(per, 2 * per)), (i, j), (mid_cell,))

    extent = int(math.ceil(cfg.timeline_extent))
    offsets = np.arange(-extent, extent + 1, dtype=np.float64)
    timeline = g_scene.standard_normal((len(offsets), cfg.grid_h, cfg.grid_w, cfg.scene_dim))
    timeline *= cfg.scene_noise
    for inst in instances:
        active = (offsets >= inst.start) & (offsets <= inst.end)
        for row, col in inst.cells:
            timeline[active, row, col] += cfg.signature_magnitude * signatures[inst.class_id]

    detections: list[ActorProposal] = []
    for i, box in enumerate(boxes):
        if g_det.random() < cfg.false_negative_rate:
            continue
        jitter = g_det.normal(0.0, cfg.box_jitter, size=4)
        det_box = sanitize_box(*(c + j for c, j in zip(box.corners(), jitter)))
        det_box = BoundingBox(*(_round6(c) for c in det_box.corners()))
        score = g_det.uniform(cfg.confidence_calibration, 0.98)
        detections.append(
            ActorProposal(det_box, _round6(score), appearances[i].copy(), geometry_vector(det_box))
        )
    free = max(0, cfg.proposal_count - len(detections))
    for _ in range(free):
        if g_det.random() < cfg.false_positive_rate:
            fp_box = _sample_box(g_det, cfg.box_size_range)
            feature = g_det.standard_normal(cfg.actor_dim)
            feature /= np.linalg.norm(feature)
            detections.append(
                ActorProposal(
                    fp_box,
                    _round6(g_det.uniform(0.05, 0.5)),
                    feature,
                    geometry_vector(fp_box),
                )
            )

    proposals = sample_proposals(detections, cfg.proposal_count, mode="topk",
                                 actor_dim=cfg.actor_dim)
    truth = ClipTruth(boxes, labels, appearances, instances)
    return ClipSample(
        clip_id,
        _round6(keyframe_time),
        detections,
        proposals,
        offsets,
        timeline,
        truth,
    )


def sample_proposals(
    detections: list[ActorProposal],
    k: int,
    mode: str = "topk",
    tau: float = 0.0,
    actor_dim: int | None = None,
) -> list[ActorProposal]:
    """Densify detections to exactly k proposals.

    ``topk`` keeps the k highest-confidence detections regardless of any
    threshold; ``threshold`` first drops detections below tau. Free slots
    are padded with zero-feature, zero-confidence dummies at the image
    center.
    """
    if k <= 0:
        raise ConfigError(f"proposal count must be positive, got {k}")
    if mode not in ("topk", "threshold"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    if not detections:
        log.info("no detections at all; emitting %d dummy proposals", k)
    if actor_dim is None:
        actor_dim = len(detections[0].feature) if detections else 1
    kept = list(detections)
    if mode == "threshold":
        kept = [d for d in kept if d.person_score >= tau]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].person_score, i))
    kept = [kept[i] for i in order[:k]]
    while len(kept) < k:
        kept.append(dummy_proposal(actor_dim))
    return kept


def ground_truth_set(clip: ClipSample, k: int) -> GroundTruthSet:
    return GroundTruthSet.build(clip.truth.boxes, clip.truth.labels, k)


# ---------------------------------------------------------------------------
# windows over the timeline


def window_grid(clip: ClipSample, interval: tuple[float, float],
                grid_t: int) -> SceneContextGrid:
    """Assemble a grid for an absolute time interval from the clip timeline.

    Sample times are the grid_t sub-interval midpoints, each snapped to
    the nearest stored per-second slice; times outside the timeline are
    clamped to its bounds (with a log note).
    """
    start, stop = interval
    rel_times = [
        start - clip.keyframe_time + (q + 0.5) * (stop - start) / grid_t
        for q in range(grid_t)
    ]
    lo, hi = clip.timeline_offsets[0], clip.timeline_offsets[-1]
    slices = []
    clamped = False
    for rt in rel_times:
        snapped = round(rt + clip.time_offset)
        if snapped < lo or snapped > hi:
            clamped = True
            snapped = min(max(snapped, lo), hi)
        slices.append(clip.timeline[int(snapped - lo)])
    if clamped:
        log.info("clip %s: window %s clamped to timeline bounds", clip.clip_id, interval)
    stacked = np.stack(slices)  # (T, H, W, C')
    h, w = stacked.shape[1], stacked.shape[2]
    features = stacked.reshape(grid_t * h * w, -1).T  # t-major, then row, then column
    return SceneContextGrid(h, w, grid_t, features)


def keyframe_grid(clip: ClipSample, t_before: float, t_after: float,
                  grid_t: int) -> SceneContextGrid:
    t = clip.keyframe_time
    return window_grid(clip, (t - t_before, t + t_after), grid_t)


def temporal_augment(clip: ClipSample, delta_range: float, rng: RngStream) -> ClipSample:
    """Shift the clip fed to the model by a uniform offset; truth is unchanged."""
    if delta_range < 0:
        raise ConfigError(f"offset range must be nonnegative, got {delta_range}")
    if delta_range == 0.0:
        return clip
    slack = float(clip.timeline_offsets[-1])
    if delta_range > slack:
        raise ConfigError(
            f"offset range {delta_range} exceeds timeline slack {slack}"
        )
    delta = rng.generator().uniform(-delta_range, delta_range)
    return replace(clip, time_offset=clip.time_offset + delta)


# ---------------------------------------------------------------------------
# dataset bundles


@dataclass
class Dataset:
    cfg: ScenarioConfig
    train: list[ClipSample]
    eval: list[ClipSample]

    def clip(self, clip_id: str) -> ClipSample:
        for c in self.train + self.eval:
            if c.clip_id == clip_id:
                return c
        raise ValidationError(f"unknown clip id {clip_id!r}")


def generate_dataset(cfg: ScenarioConfig) -> Dataset:
    root = RngStream(cfg.seed)
    train = [
        generate_clip(cfg, root.child(0, i), f"train_{i:04d}", 900.0 + i)
        for i in range(cfg.train_clips)
    ]
    evals = [
        generate_clip(cfg, root.child(1, i), f"eval_{i:04d}", 9000.0 + i)
        for i in range(cfg.eval_clips)
    ]
    return Dataset(cfg, train, evals)


# ---------------------------------------------------------------------------
# annotation / prediction interchange (CSV)


def _format_row(clip_id, timestamp, box, class_id, score=None) -> list[str]:
    row = [
        str(clip_id),
        f"{timestamp:.6f}",
        f"{box.x_lt:.6f}",
        f"{box.y_lt:.6f}",
        f"{box.x_rb:.6f}",
        f"{box.y_rb:.6f}",
        str(int(class_id)),
    ]
    if score is not None:
        row.append(repr(float(score)))
    return row


def write_annotations(path, records):
    """records: iterables of (clip_id, timestamp, BoundingBox, class_id)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for clip_id, timestamp, box, class_id in records:
            writer.writerow(_format_row(clip_id, timestamp, box, class_id))


def write_predictions(path, records):
    """records: iterables of (clip_id, timestamp, BoundingBox, class_id, score)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for clip_id, timestamp, box, class_id, score in records:
            writer.writerow(_format_row(clip_id, timestamp, box, class_id, score))


def _parse_rows(path, want_score: bool):
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            expect = 8 if want_score else 7
            if len(row) != expect:
                raise ParseError(f"{path}:{lineno}: expected {expect} fields, got {len(row)}")
            try:
                timestamp = float(row[1])
                coords = [float(v) for v in row[2:6]]
                class_id = int(row[6])
                score = float(row[7]) if want_score else None
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if not all(0.0 <= c <= 1.0 for c in coords):
                raise ValidationError(f"{path}:{lineno}: coordinates outside [0, 1]")
            try:
                box = BoundingBox(*coords)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            record = (row[0], timestamp, box, class_id)
            out.append(record + ((score,) if want_score else ()))
    return out


def read_annotations(path) -> list[tuple]:
    """Parse ground-truth rows (clip_id, timestamp, box, class_id)."""
    return _parse_rows(path, want_score=False)


def read_predictions(path) -> list[tuple]:
    """Parse prediction rows (clip_id, timestamp, box, class_id, score)."""
    return _parse_rows(path, want_score=True)


def annotation_records(clips: list[ClipSample]):
    for clip in clips:
        for i, box in enumerate(clip.truth.boxes):
            for k in np.flatnonzero(clip.truth.labels[i]):
                yield clip.clip_id, clip.keyframe_time, box, int(k)


# ---------------------------------------------------------------------------
# dataset solvability probes (non-learned)


def oracle_scene_detections(clip: ClipSample, cfg: ScenarioConfig,
                            t_before: float, t_after: float):
    """Score ground-truth boxes by correlating scene tokens with signatures.

    Reads the keyframe window at each actor's own cell (pose and object
    classes) and at midpoints to nearby partners (pair classes). This is
    the non-learned ceiling establishing the dataset is solvable.
    """
    signatures = signature_bank(cfg.seed, cfg.num_classes, cfg.scene_dim)
    grid = keyframe_grid(clip, t_before, t_after, cfg.grid_t)
    per = cfg.num_classes // len(CATEGORIES)
    centers = [b.center for b in clip.truth.boxes]
    for i, box in enumerate(clip.truth.boxes):
        own = _cell_of(cfg, *centers[i])
        mids = [
            _cell_of(cfg, 0.5 * (centers[i][0] + centers[j][0]),
                     0.5 * (centers[i][1] + centers[j][1]))
            for j in range(len(centers))
            if j != i and math.dist(centers[i], centers[j]) <= cfg.pair_distance_max
        ]
        for k in range(cfg.num_classes):
            cells = mids if per <= k < 2 * per else [own]
            best = -np.inf
            for row, col in cells:
                for t in range(cfg.grid_t):
                    token = grid.features[:, grid.token_index(t, row, col)]
                    best = max(best, float(token @ signatures[k]))
            if best == -np.inf:
                best = 0.0
            yield clip.clip_id, clip.keyframe_time, box, k, best


def appearance_knn_detections(train_clips: list[ClipSample], clip: ClipSample,
                              num_classes: int):
    """Score classes from actor appearance alone (nearest neighbours).

    Appearance carries no action information by construction, so this
    probe bounds how much a scene-blind model could leak.
    """
    bank = np.concatenate([c.truth.appearances for c in train_clips])
    bank_labels = np.concatenate([c.truth.labels for c in train_clips])
    for i, box in enumerate(clip.truth.boxes):
        sims = bank @ clip.truth.appearances[i]
        order = np.argsort(-sims)[:5]
        scores = bank_labels[order].mean(axis=0)
        for k in range(num_classes):
            yield clip.clip_id, clip.keyframe_time, box, k, float(scores[k])
