"""End-to-end orchestration: encoder, pointwise predictor, candidate
pipeline, mask decoding, scoring, and the desk-scale training loop.

The feature encoder is a pluggable stand-in for a heavy backbone: simple
per-point statistics (position, color, and mean/std over the 16 nearest
neighbors) pushed through a seeded 3-layer map. Everything downstream runs
on the differentiation tape so inference and training share one forward
path.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from . import autodiff as ad
from .aggregator import AggregatorBlock, CandidateHeads, CandidateSet, aggregate_batch, ball_query, heads
from .autodiff import Var
from .core import Aabb, Prediction, Scene, binarize, devoxelize_late, mask_iou, voxelize
from .dynconv import KernelLayout, decoder_logits
from .evalmetrics import average_precision
from .sampling import OccupancyState, SampleBudget, fps, ia_fps_infer
from .supervision import (
    Assignment,
    InstancePredictions,
    InstanceTargets,
    LossReport,
    LossWeights,
    instance_loss_terms,
    matching_cost_matrix,
    one_to_many_match,
    pointwise_terms,
)

logger = logging.getLogger(__name__)

ENCODER_KNN = 16
ENCODER_INPUT_DIM = 18

MODEL_MAGIC = b"PCMODEL\x00"
MODEL_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline knobs: architecture, sampling, decoding, and training."""

    num_classes: int = 5
    d_model: int = 32
    mask_dim: int = 32
    layout_dims: tuple[int, ...] = (41, 32, 1)
    geo_cue: str = "on"  # "on" | "zero" (features zeroed) | "off" (channels removed)
    tau: float = 0.5
    chunk_sizes: tuple[int, ...] = (192, 128, 64)
    k_train: int = 256
    stage1_budget: int = 512
    duplication: int = 4
    radii: tuple[float, float] = (0.2, 0.4)
    num_neighbors: int = 32
    nms_iou: float = 0.2
    binarize_threshold: float = 0.5
    background_classes: tuple[int, ...] = (0,)
    use_superpoints: bool = True
    voxel_size: float | None = None
    devoxelization: str = "late"  # "early" | "late"
    decode_chunk: int = 96
    # Box-difference features act as conditioning: the mask loss does not
    # push gradients into the box heads through them (the box terms own
    # that supervision). Flip on to backpropagate through the geo inputs.
    geo_gradient: bool = False
    # Reference box of candidate k inside the difference features: the
    # pointwise box field evaluated at the candidate point ("point") or the
    # candidate head's box prediction ("head").
    geo_reference: str = "point"
    # training
    learning_rate: float = 5e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    grad_clip: float = 5.0
    batch_size: int = 4
    epochs: int = 40
    eval_every: int = 10
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pointwise_box_weight: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need background plus at least one instance class")
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must lie in (0, 1)")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError("NMS threshold must lie in (0, 1)")
        if not (0.0 < self.binarize_threshold < 1.0):
            raise ValueError("binarization threshold must lie in (0, 1)")
        if self.geo_cue not in ("on", "zero", "off"):
            raise ValueError("geo_cue must be one of on/zero/off")
        if self.geo_reference not in ("point", "head"):
            raise ValueError("geo_reference must be point or head")
        if self.devoxelization not in ("early", "late"):
            raise ValueError("devoxelization must be early or late")
        if self.layout_dims[0] != self.decoder_input_dim:
            raise ValueError(
                f"layout input width {self.layout_dims[0]} does not match the decoder "
                f"input ({self.decoder_input_dim} for geo_cue={self.geo_cue})"
            )
        if self.k_train < 1 or self.stage1_budget < 1 or self.duplication < 1:
            raise ValueError("sampling budgets and duplication must be positive")

    @property
    def decoder_input_dim(self) -> int:
        return self.mask_dim + 3 + (0 if self.geo_cue == "off" else 6)

    @property
    def candidate_classes(self) -> int:
        # instance classes (semantic 1..C-1) plus a trailing no-object slot
        return self.num_classes

    def kernel_layout(self) -> KernelLayout:
        return KernelLayout(self.layout_dims)

    def sample_budget(self) -> SampleBudget:
        return SampleBudget(self.chunk_sizes)


def default_config_for(model: "ModelParams", **overrides) -> PipelineConfig:
    """A config matching a model's structure, geo mode inferred from widths."""
    geo = "off" if model.layout_dims[0] == model.mask_dim + 3 else "on"
    fields = dict(
        num_classes=model.num_classes,
        d_model=model.d_model,
        mask_dim=model.mask_dim,
        layout_dims=tuple(model.layout_dims),
        geo_cue=geo,
    )
    fields.update(overrides)
    return PipelineConfig(**fields)


def _param_specs(config: PipelineConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, h, c = config.d_model, config.mask_dim, config.num_classes
    hp = config.kernel_layout().param_count
    specs: list[tuple[str, tuple[int, ...]]] = []
    widths = [ENCODER_INPUT_DIM, d, d, d]
    for i in range(3):
        specs.append((f"enc.w{i}", (widths[i], widths[i + 1])))
        specs.append((f"enc.b{i}", (widths[i + 1],)))
    specs += [
        ("point.sem_w", (d, c)),
        ("point.sem_b", (c,)),
        ("point.box_w", (d, 6)),
        ("point.box_b", (6,)),
        ("point.mask_w", (d, h)),
        ("point.mask_b", (h,)),
    ]
    for name in ("pa1", "pa2"):
        pa_widths = [d + 3, d, d, d]
        for i in range(3):
            specs.append((f"{name}.w{i}", (pa_widths[i], pa_widths[i + 1])))
            specs.append((f"{name}.b{i}", (pa_widths[i + 1],)))
    specs += [
        ("head.cls_w", (d, config.candidate_classes)),
        ("head.cls_b", (config.candidate_classes,)),
        ("head.box_w", (d, 6)),
        ("head.box_b", (6,)),
        ("head.ker_w", (d, hp)),
        ("head.ker_b", (hp,)),
        ("head.q_w", (d, 1)),
        ("head.q_b", (1,)),
    ]
    return specs


@dataclass
class ModelParams:
    """Learnable parameters plus the structural facts needed to use them."""

    d_model: int
    mask_dim: int
    num_classes: int
    layout_dims: tuple[int, ...]
    params: dict

    @classmethod
    def initialize(cls, config: PipelineConfig, seed: int) -> "ModelParams":
        """Seeded uniform init in +-1/sqrt(fan_in); each bias follows its weight."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        fan_in = ENCODER_INPUT_DIM
        for name, shape in _param_specs(config):
            if len(shape) == 2:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config.d_model, config.mask_dim, config.num_classes, tuple(config.layout_dims), params)

    def as_vars(self, trainable: bool = False) -> dict:
        if trainable:
            return {name: ad.parameter(value) for name, value in self.params.items()}
        return {name: Var(value) for name, value in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def kernel_layout(self) -> KernelLayout:
        return KernelLayout(self.layout_dims)

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise RuntimeError(f"parameter {name} became non-finite")


def match_config(model: ModelParams, config: PipelineConfig) -> None:
    """Raise when a config cannot drive the given parameters."""
    if (
        model.d_model != config.d_model
        or model.mask_dim != config.mask_dim
        or model.num_classes != config.num_classes
        or tuple(model.layout_dims) != tuple(config.layout_dims)
    ):
        raise ValueError("model structure does not match the pipeline config")


def encoder_inputs(positions: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Per-point raw encoder features: self plus k-nearest-neighbor stats.

    Neighborhoods are the 16 nearest points (self included) under a
    deterministic distance-then-index ordering, so duplicated coordinates
    always receive identical rows.
    """
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    m = positions.shape[0]
    k = min(ENCODER_KNN, m)
    nn = np.empty((m, k), dtype=np.int64)
    chunk = max(1, int(2_000_000 // max(m, 1)))
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        diff = positions[start:stop, None, :] - positions[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        nn[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    npos = positions[nn]
    ncol = colors[nn]
    return np.concatenate(
        [
            positions,
            colors,
            npos.mean(axis=1),
            npos.std(axis=1),
            ncol.mean(axis=1),
            ncol.std(axis=1),
        ],
        axis=1,
    )


def _voxel_means(values: np.ndarray, vmap) -> np.ndarray:
    sums = np.zeros((vmap.num_voxels, values.shape[1]))
    np.add.at(sums, vmap.point_to_voxel, values)
    counts = np.bincount(vmap.point_to_voxel, minlength=vmap.num_voxels).astype(np.float64)
    return sums / counts[:, None]


@dataclass
class EncoderCache:
    """Precomputed raw encoder inputs (and the voxel map in voxel mode)."""

    inputs: np.ndarray
    vmap: object = None


def build_encoder_cache(scene: Scene, config: PipelineConfig) -> EncoderCache:
    if config.voxel_size is None:
        return EncoderCache(encoder_inputs(scene.positions, scene.colors))
    vmap = voxelize(scene, config.voxel_size)
    vpos = _voxel_means(scene.positions, vmap)
    vcol = _voxel_means(scene.colors, vmap)
    return EncoderCache(encoder_inputs(vpos, vcol), vmap)


def _mlp3(x: Var, p: dict, prefix: str) -> Var:
    h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w0"]), p[f"{prefix}.b0"]))
    h = ad.relu(ad.add(ad.matmul(h, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _affine(x: Var, p: dict, name: str) -> Var:
    return ad.add(ad.matmul(x, p[f"{name}_w"]), p[f"{name}_b"])


def _box_head(raw: Var) -> Var:
    center = raw[:, :3]
    half = ad.mul(ad.softplus(raw[:, 3:]), 0.5)
    return ad.concat([ad.sub(center, half), ad.add(center, half)], axis=1)


def _forward_pointwise(scene: Scene, p: dict, config: PipelineConfig, cache: EncoderCache | None):
    """Backbone features plus pointwise heads, all at point resolution.

    In voxel mode the encoder and, under late expansion, the pointwise
    heads run at voxel resolution; rows broadcast back to points via the
    voxel map. Early expansion broadcasts right after the encoder. Both
    orders produce identical per-point rows because every map is pointwise.
    """
    if cache is None:
        cache = build_encoder_cache(scene, config)
    feats = _mlp3(Var(cache.inputs), p, "enc")
    expand_late = cache.vmap is not None and config.devoxelization == "late"
    if cache.vmap is not None and not expand_late:
        feats = feats[cache.vmap.point_to_voxel]
    sem = _affine(feats, p, "point.sem")
    boxes = _box_head(_affine(feats, p, "point.box"))
    fmask = _affine(feats, p, "point.mask")
    if expand_late:
        idx = cache.vmap.point_to_voxel
        feats, sem, boxes, fmask = feats[idx], sem[idx], boxes[idx], fmask[idx]
    return feats, sem, boxes, fmask


def encode(scene: Scene, model: ModelParams, config: PipelineConfig | None = None) -> np.ndarray:
    """Deterministic per-point features, (N, D)."""
    config = config or default_config_for(model)
    if scene.num_points < 1:
        raise ValueError("scene must contain points")
    cache = build_encoder_cache(scene, config)
    feats = _mlp3(Var(cache.inputs), model.as_vars(), "enc").value
    if cache.vmap is not None:
        feats = devoxelize_late(feats, cache.vmap)
    return feats


def pointwise_predict(
    scene: Scene, model: ModelParams, config: PipelineConfig | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point (semantic logits, boxes, mask features) as arrays."""
    config = config or default_config_for(model)
    _, sem, boxes, fmask = _forward_pointwise(scene, model.as_vars(), config, None)
    return sem.value, boxes.value, fmask.value


def _aggregator_blocks(p: dict, config: PipelineConfig) -> tuple[AggregatorBlock, AggregatorBlock]:
    def block(prefix: str, radius: float) -> AggregatorBlock:
        layers = tuple((p[f"{prefix}.w{i}"], p[f"{prefix}.b{i}"]) for i in range(3))
        return AggregatorBlock(radius, config.num_neighbors, layers)

    return block("pa1", config.radii[0]), block("pa2", config.radii[1])


def _candidate_heads(p: dict) -> CandidateHeads:
    return CandidateHeads(
        cls_weight=p["head.cls_w"],
        cls_bias=p["head.cls_b"],
        box_weight=p["head.box_w"],
        box_bias=p["head.box_b"],
        kernel_weight=p["head.ker_w"],
        kernel_bias=p["head.ker_b"],
        quality_weight=p["head.q_w"],
        quality_bias=p["head.q_b"],
    )


def _decode_mask_logits(
    fmask: Var,
    positions: np.ndarray,
    point_boxes: Var,
    cand_positions: np.ndarray,
    cand_boxes: Var,
    kernels: Var,
    layout: KernelLayout,
    geo_cue: str,
    geo_gradient: bool = False,
) -> Var:
    """Raw decoder logits (K, M) for a batch of candidates.

    Unless ``geo_gradient`` is set, the box-difference block enters as a
    constant so the mask loss cannot tug on the box heads through it.
    """
    k = cand_positions.shape[0]
    m = positions.shape[0]
    f_pos = positions[None, :, :] - cand_positions[:, None, :]
    parts = [ad.broadcast_to(ad.reshape(fmask, (1, m, fmask.shape[1])), (k, m, fmask.shape[1]))]
    parts.append(Var(f_pos))
    if geo_cue != "off":
        pb = point_boxes if geo_gradient else Var(ad.value_of(point_boxes))
        cb = cand_boxes if geo_gradient else Var(ad.value_of(cand_boxes))
        geo = ad.absolute(ad.sub(ad.reshape(pb, (1, m, 6)), ad.reshape(cb, (k, 1, 6))))
        if geo_cue == "zero":
            geo = ad.mul(geo, 0.0)
        parts.append(geo)
    return decoder_logits(ad.concat(parts, axis=2), kernels, layout)


def nms(masks: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy mask suppression by descending score, ties to lower index.

    A mask is dropped when its IoU with an already-kept mask strictly
    exceeds the threshold.
    """
    masks = np.asarray(masks).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if masks.shape[0] != scores.shape[0]:
        raise ValueError("masks and scores must align")
    order = np.lexsort((np.arange(scores.size), -scores))
    kept: list[int] = []
    for idx in order:
        if all(mask_iou(masks[idx], masks[keep]) <= iou_threshold for keep in kept):
            kept.append(int(idx))
    return kept


def superpoint_align(mask_values: np.ndarray, superpoints: np.ndarray | None) -> np.ndarray:
    """Snap a soft mask to whole superpoints by mean value; strict > 0.5.

    Falls back to plain binarization when no superpoints are given.
    """
    mask_values = np.asarray(mask_values, dtype=np.float64)
    if superpoints is None:
        return binarize(mask_values)
    superpoints = np.asarray(superpoints)
    _, inverse = np.unique(superpoints, return_inverse=True)
    sums = np.bincount(inverse, weights=mask_values)
    counts = np.bincount(inverse)
    keep = (sums / counts) > 0.5
    return keep[inverse]


def _score_candidates(class_logits: np.ndarray, quality_logits: np.ndarray):
    """Semantic class ids, confidence scores, and class distributions.

    Confidence is the best instance-class probability times the squashed
    quality logit; the trailing no-object column never wins a class.
    """
    probs = softmax(class_logits, axis=1)
    inst_probs = probs[:, :-1]
    best_col = inst_probs.argmax(axis=1)
    scores = inst_probs.max(axis=1) * expit(quality_logits)
    return best_col + 1, scores, probs


def infer(
    scene: Scene,
    model: ModelParams,
    config: PipelineConfig | None = None,
    timings: dict | None = None,
) -> list[Prediction]:
    """Full inference pass; deterministic given (scene, model, config).

    Returns predictions sorted by descending confidence with masks
    binarized (and superpoint-aligned when the scene carries a partition).
    A scene with no predicted-foreground points yields an empty list.
    """
    config = config or default_config_for(model)
    match_config(model, config)
    p = model.as_vars()
    layout = config.kernel_layout()

    t0 = time.perf_counter()
    feats, sem, point_boxes, fmask = _forward_pointwise(scene, p, config, None)
    t1 = time.perf_counter()

    def stop(reason: str) -> list[Prediction]:
        logger.debug("inference stopped early: %s", reason)
        if timings is not None:
            timings.update(
                {"encoder": (t1 - t0) * 1e3, "instance_encoder": 0.0, "mask_decoder": 0.0}
            )
        return []

    positions = scene.positions
    background = softmax(sem.value, axis=1)[:, list(config.background_classes)].sum(axis=1)
    state = OccupancyState(background, threshold=config.tau)
    foreground = state.foreground()
    if not foreground.any():
        return stop("no foreground")

    stage1 = fps(positions, min(config.stage1_budget, int(foreground.sum())), candidate_filter=foreground)
    block1, block2 = _aggregator_blocks(p, config)
    nb1 = ball_query(positions, positions[stage1], block1.radius, block1.num_neighbors, stage1)
    feats1 = aggregate_batch(block1, feats, positions, stage1, nb1)

    sub_pos = positions[stage1]
    sub_state = OccupancyState(background[stage1], threshold=config.tau)
    head_params = _candidate_heads(p)
    sub_fmask = fmask[stage1]
    sub_boxes = point_boxes[stage1]

    def decode_for(local_idx: np.ndarray) -> np.ndarray:
        nb = ball_query(sub_pos, sub_pos[local_idx], block2.radius, block2.num_neighbors, local_idx)
        f2 = aggregate_batch(block2, feats1, sub_pos, local_idx, nb)
        _, boxes_c, kernels_c, _ = heads(f2, head_params)
        ref = sub_boxes[local_idx] if config.geo_reference == "point" else boxes_c
        logits = _decode_mask_logits(
            sub_fmask, sub_pos, sub_boxes, sub_pos[local_idx], ref, kernels_c, layout,
            config.geo_cue, config.geo_gradient,
        )
        return expit(logits.value)

    local_order = ia_fps_infer(sub_state, sub_pos, config.sample_budget(), decode_for)
    if local_order.size == 0:
        return stop("sampling exhausted")
    candidates = stage1[local_order]

    nb2 = ball_query(sub_pos, sub_pos[local_order], block2.radius, block2.num_neighbors, local_order)
    feats2 = aggregate_batch(block2, feats1, sub_pos, local_order, nb2)
    cls_logits, boxes, kernels, quality = heads(feats2, head_params)
    candidate_set = CandidateSet(
        indices=candidates,
        features=ad.value_of(feats2),
        class_logits=ad.value_of(cls_logits),
        boxes=ad.value_of(boxes),
        kernels=ad.value_of(kernels),
        quality=ad.value_of(quality),
    )
    t2 = time.perf_counter()

    soft_masks = np.empty((candidates.size, scene.num_points))
    for start in range(0, candidates.size, config.decode_chunk):
        sel = slice(start, min(start + config.decode_chunk, candidates.size))
        ref = point_boxes[candidates[sel]] if config.geo_reference == "point" else boxes[sel]
        logits = _decode_mask_logits(
            fmask,
            positions,
            point_boxes,
            positions[candidates[sel]],
            ref,
            kernels[sel],
            layout,
            config.geo_cue,
            config.geo_gradient,
        )
        soft_masks[sel] = expit(logits.value)

    class_ids, scores, class_probs = _score_candidates(
        candidate_set.class_logits, candidate_set.quality
    )
    binary = binarize(soft_masks, config.binarize_threshold)
    nonempty = np.flatnonzero(binary.any(axis=1))
    kept = [int(nonempty[i]) for i in nms(binary[nonempty], scores[nonempty], config.nms_iou)]

    predictions = []
    for idx in kept:
        soft = soft_masks[idx]
        aligned = (
            superpoint_align(soft, scene.superpoints)
            if config.use_superpoints and scene.superpoints is not None
            else binarize(soft, config.binarize_threshold)
        )
        if not aligned.any():
            continue
        box_vec = candidate_set.boxes[idx]
        predictions.append(
            Prediction(
                class_id=int(class_ids[idx]),
                score=float(scores[idx]),
                box=Aabb(box_vec[:3], box_vec[3:]),
                mask=aligned,
                soft_mask=soft,
                class_dist=class_probs[idx],
            )
        )
    predictions.sort(key=lambda pr: -pr.score)
    t3 = time.perf_counter()
    if timings is not None:
        timings.update(
            {
                "encoder": (t1 - t0) * 1e3,
                "instance_encoder": (t2 - t1) * 1e3,
                "mask_decoder": (t3 - t2) * 1e3,
            }
        )
    return predictions


class RmsProp:
    """Momentum-free adaptive step with global-norm gradient clipping."""

    def __init__(self, params: dict, lr: float, decay: float = 0.9, eps: float = 1e-8, clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip = clip
        self.accum = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, grads: dict) -> None:
        if self.clip > 0.0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {name: g * (self.clip / norm) for name, g in grads.items()}
        for name, g in grads.items():
            acc = self.accum[name]
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            self.params[name] -= self.lr * g / (np.sqrt(acc) + self.eps)


def scene_loss(
    scene: Scene,
    model_vars: dict,
    config: PipelineConfig,
    cache: EncoderCache | None = None,
) -> tuple[Var, LossReport]:
    """Composite training loss of one scene on the tape.

    Sampling and matching are discrete decisions taken on values; the
    gradients flow through the pointwise heads, the aggregation stack, the
    candidate heads, and the mask decoder.
    """
    feats, sem, point_boxes, fmask = _forward_pointwise(scene, model_vars, config, cache)
    pt_terms = pointwise_terms(sem, point_boxes, scene, config.pointwise_box_weight)

    positions = scene.positions
    background = softmax(sem.value, axis=1)[:, list(config.background_classes)].sum(axis=1)
    foreground = (1.0 - background) > config.tau
    if not foreground.any():
        # Degenerate early-training state: fall back to sampling everywhere.
        foreground = np.ones(scene.num_points, dtype=bool)
    ad.record(foreground)
    stage1 = fps(positions, min(config.stage1_budget, int(foreground.sum())), candidate_filter=foreground)
    ad.record(stage1)
    stage2_local = np.arange(min(config.k_train, stage1.size))
    candidates = stage1[stage2_local]

    block1, block2 = _aggregator_blocks(model_vars, config)
    nb1 = ball_query(positions, positions[stage1], block1.radius, block1.num_neighbors, stage1)
    feats1 = aggregate_batch(block1, feats, positions, stage1, nb1)
    sub_pos = positions[stage1]
    nb2 = ball_query(sub_pos, sub_pos[stage2_local], block2.radius, block2.num_neighbors, stage2_local)
    feats2 = aggregate_batch(block2, feats1, sub_pos, stage2_local, nb2)
    cls_logits, boxes, kernels, quality = heads(feats2, _candidate_heads(model_vars))

    geo_ref = point_boxes[candidates] if config.geo_reference == "point" else boxes
    mask_logits = _decode_mask_logits(
        fmask,
        positions,
        point_boxes,
        positions[candidates],
        geo_ref,
        kernels,
        config.kernel_layout(),
        config.geo_cue,
        config.geo_gradient,
    )

    targets = InstanceTargets.from_scene(scene)
    if targets.masks.shape[0] > 0:
        costs = matching_cost_matrix(
            expit(mask_logits.value),
            softmax(cls_logits.value, axis=1),
            targets.masks,
            targets.classes,
            config.loss_weights,
        )
        assignment = one_to_many_match(costs, config.duplication)
        ad.record(np.asarray(assignment.pairs))
    else:
        assignment = Assignment((), tuple(range(candidates.size)), 1)
    preds = InstancePredictions(mask_logits, cls_logits, boxes, quality)
    inst_terms = instance_loss_terms(assignment, preds, targets, config.loss_weights)

    total = ad.add(pt_terms["total"], inst_terms["total"])
    values = {
        "cls_loss": float(inst_terms["cls"].value),
        "box_loss": float(inst_terms["box"].value),
        "mask_loss": float(inst_terms["mask"].value),
        "ms_loss": float(inst_terms["ms"].value),
        "semantic_loss": float(pt_terms["semantic"].value),
        "point_box_loss": float(pt_terms["point_box"].value),
    }
    if not all(np.isfinite(v) for v in values.values()):
        raise RuntimeError(f"non-finite loss (diverged): {values}")
    return total, LossReport(weights=config.loss_weights, **values)


def scene_loss_report(scene: Scene, model: ModelParams, config: PipelineConfig) -> LossReport:
    """Loss report of one scene including the full parameter gradients."""
    model_vars = model.as_vars(trainable=True)
    total, report = scene_loss(scene, model_vars, config)
    ad.backward(total)
    report.gradients = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in model_vars.items()
    }
    return report


def train(
    dataset: list[Scene],
    config: PipelineConfig,
    seed: int,
    val_scenes: list[Scene] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Desk-scale training: per-batch adaptive steps over a fixed scene order.

    Logs per-epoch mean loss components and, every ``eval_every`` epochs
    (and at the end), the validation mask AP at IoU 0.5. Aborts on a
    non-finite loss.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for scene in dataset:
        if scene.num_classes != config.num_classes:
            raise ValueError("scene class count does not match the config")
    model = ModelParams.initialize(config, seed)
    caches = [build_encoder_cache(scene, config) for scene in dataset]
    optimizer = RmsProp(
        model.params, config.learning_rate, config.rms_decay, config.rms_eps, config.grad_clip
    )
    history: list[dict] = []
    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        for start in range(0, len(dataset), config.batch_size):
            batch = range(start, min(start + config.batch_size, len(dataset)))
            grads = {name: np.zeros_like(value) for name, value in model.params.items()}
            for idx in batch:
                model_vars = model.as_vars(trainable=True)
                total, report = scene_loss(dataset[idx], model_vars, config, caches[idx])
                if not np.isfinite(total.value):
                    raise RuntimeError(f"non-finite loss at epoch {epoch}, scene {idx}: {report}")
                ad.backward(total)
                for name, leaf in model_vars.items():
                    if leaf.grad is not None:
                        grads[name] += leaf.grad
                for key, value in vars(report).items():
                    if isinstance(value, float):
                        sums[key] = sums.get(key, 0.0) + value
                sums["total"] = sums.get("total", 0.0) + report.total
            scale = 1.0 / len(batch)
            optimizer.step({name: g * scale for name, g in grads.items()})
        model.check_finite()
        entry = {"epoch": epoch} | {key: value / len(dataset) for key, value in sums.items()}
        if val_scenes and (epoch == config.epochs - 1 or (epoch + 1) % config.eval_every == 0):
            entry["val_ap50"] = validation_ap50(model, val_scenes, config)
        history.append(entry)
        logger.info(
            "epoch %d: loss %.4f%s",
            epoch,
            entry["total"],
            f", val AP50 {entry['val_ap50']:.3f}" if "val_ap50" in entry else "",
        )
    return model, history


def validation_ap50(model: ModelParams, scenes: list[Scene], config: PipelineConfig) -> float:
    predictions = [infer(scene, model, config) for scene in scenes]
    ap50, _ = average_precision(predictions, scenes, thresholds=(0.5,))
    return ap50


def save_model(path, model: ModelParams) -> None:
    """Little-endian flat parameter dump behind a JSON header."""
    header = {
        "version": MODEL_VERSION,
        "d_model": model.d_model,
        "mask_dim": model.mask_dim,
        "num_classes": model.num_classes,
        "layout_dims": list(model.layout_dims),
        "params": [{"name": name, "shape": list(value.shape)} for name, value in model.params.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for value in model.params.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as f:
        if f.read(8) != MODEL_MAGIC:
            raise ValueError("not a model file (bad magic)")
        (length,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(length).decode("utf-8"))
        if header.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {header.get('version')}")
        params = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = f.read(count * 8)
            if len(data) != count * 8:
                raise ValueError("truncated model file")
            params[spec["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing data in model file")
    return ModelParams(
        d_model=header["d_model"],
        mask_dim=header["mask_dim"],
        num_classes=header["num_classes"],
        layout_dims=tuple(header["layout_dims"]),
        params=params,
    )
