"""Grounding module: location regression, semantic matching, and IoU-quality
heads, plus dense target assignment, temporal IoU, and the training losses.

Geometry (coordinates, target assignment, interval IoU) runs in float64 plain
numpy; the differentiable loss path stays on float32 tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import Conv1dBlock, Conv1dBlockSpec

log = logging.getLogger(__name__)

IOU_FLOOR = 1e-6   # tIoU clamp inside the -ln loss
PROB_EPS = 1e-6    # probability clamp inside log terms

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


# -- pyramid geometry -----------------------------------------------------------


@dataclass(frozen=True)
class PyramidGeometry:
    """Shapes of the L-level pyramid over K segments: T_i = K / 2^(i-1),
    stride s_i = 2^(i-1), location j at segment-time (j + 0.5) * s_i."""

    segments: int
    levels: int
    strides: tuple[int, ...]
    sizes: tuple[int, ...]
    coords: tuple[np.ndarray, ...]   # float64, per level
    flat_coords: np.ndarray          # float64, all levels concatenated
    flat_strides: np.ndarray         # float64, stride per flat location

    @property
    def total(self) -> int:
        return int(self.flat_coords.size)


def build_geometry(segments: int, levels: int) -> PyramidGeometry:
    if segments % (2 ** (levels - 1)) != 0:
        raise ValueError(f"segments={segments} not divisible by 2^(levels-1)")
    strides = tuple(2**i for i in range(levels))
    sizes = tuple(segments // s for s in strides)
    coords = tuple((np.arange(t, dtype=np.float64) + 0.5) * s for t, s in zip(sizes, strides))
    flat = np.concatenate(coords)
    flat_strides = np.concatenate([np.full(t, float(s)) for t, s in zip(sizes, strides)])
    return PyramidGeometry(segments, levels, strides, sizes, coords, flat, flat_strides)


def temporal_iou(a, b) -> np.ndarray:
    """Interval IoU; a, b are (..., 2) arrays or 2-sequences. Zero-length
    union gives 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)
    return out


@dataclass
class TargetAssignment:
    """Dense targets for one sample over the flattened pyramid."""

    positive: np.ndarray   # (total,) bool, strict interior of (t_s, t_e)
    distances: np.ndarray  # (total, 2) float64; zeros at negatives
    n_pos: int


def assign_targets(geom: PyramidGeometry, gt: tuple[float, float]) -> TargetAssignment:
    start, end = float(gt[0]), float(gt[1])
    if not (end > start):
        raise ValueError(f"degenerate ground-truth box ({start}, {end})")
    coords = geom.flat_coords
    positive = (coords > start) & (coords < end)
    distances = np.zeros((geom.total, 2), dtype=np.float64)
    distances[positive, 0] = coords[positive] - start
    distances[positive, 1] = end - coords[positive]
    return TargetAssignment(positive=positive, distances=distances, n_pos=int(positive.sum()))


def decode_boxes(distances: np.ndarray, coords: np.ndarray, segments: int) -> np.ndarray:
    """Per-location boxes (coord - d_s, coord + d_e), clamped to [0, K]."""
    d = np.asarray(distances, dtype=np.float64)
    start = np.clip(coords - d[..., 0], 0.0, float(segments))
    end = np.clip(coords + d[..., 1], 0.0, float(segments))
    return np.stack([start, end], axis=-1)


def centerness_target(distances) -> np.ndarray:
    """sqrt(min(d_s, d_e) / max(d_s, d_e)); defined only for positive distances."""
    d = np.asarray(distances, dtype=np.float64)
    if (d <= 0).any():
        raise ValueError("centerness target needs strictly positive distances")
    return np.sqrt(d.min(axis=-1) / d.max(axis=-1))


# -- heads ------------------------------------------------------------------------


@dataclass
class HeadOutputs:
    """Flattened (all levels concatenated along the location axis) predictions."""

    distances: Tensor        # (B, total, 2), segment units, > 0
    match_prob: Tensor       # (B, total), in (0, 1)
    quality: Tensor | None   # (B, total), in (0, 1); None when quality head is off


class GroundingHeads:
    """Shared-across-levels grounding module.

    Matching and location heads are two conv layers each; the quality head is
    three conv layers on the concatenation of the other heads' first-conv
    feature maps. Final distances go through exp (strict positivity) and are
    scaled by the level stride into segment units.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, k, bn = cfg.channels, cfg.kernel_size, cfg.head_batchnorm
        self.quality_mode = cfg.quality_head
        self.match_conv1 = Conv1dBlock(Conv1dBlockSpec(c, c, kernel=k, batchnorm=bn, relu=True), rng)
        self.match_conv2 = Conv1dBlock(Conv1dBlockSpec(c, 1, kernel=k), rng)
        self.loc_conv1 = Conv1dBlock(Conv1dBlockSpec(c, c, kernel=k, batchnorm=bn, relu=True), rng)
        self.loc_conv2 = Conv1dBlock(Conv1dBlockSpec(c, 2, kernel=k), rng)
        if self.quality_mode != "none":
            self.quality_conv1 = Conv1dBlock(Conv1dBlockSpec(2 * c, c, kernel=k, batchnorm=bn, relu=True), rng)
            self.quality_conv2 = Conv1dBlock(Conv1dBlockSpec(c, c, kernel=k, batchnorm=bn, relu=True), rng)
            self.quality_conv3 = Conv1dBlock(Conv1dBlockSpec(c, 1, kernel=k), rng)

    def __call__(self, pyramid: list[Tensor], strides, train: bool = False,
                 with_quality: bool = True) -> HeadOutputs:
        dist_parts, match_parts, quality_parts = [], [], []
        for p_i, stride in zip(pyramid, strides):
            b, t, _ = p_i.shape
            match_feat = self.match_conv1(p_i, train)
            match_logit = self.match_conv2(match_feat, train).reshape((b, t))
            loc_feat = self.loc_conv1(p_i, train)
            raw = self.loc_conv2(loc_feat, train)
            dist = ad.exp(raw) * float(stride)
            dist_parts.append(dist)
            match_parts.append(ad.sigmoid(match_logit))
            if self.quality_mode != "none" and with_quality:
                fused = ad.concat([match_feat, loc_feat], axis=2)
                q = self.quality_conv3(self.quality_conv2(self.quality_conv1(fused, train), train), train)
                quality_parts.append(ad.sigmoid(q.reshape((b, t))))
        quality = ad.concat(quality_parts, axis=1) if quality_parts else None
        return HeadOutputs(
            distances=ad.concat(dist_parts, axis=1),
            match_prob=ad.concat(match_parts, axis=1),
            quality=quality,
        )

    def named_params(self):
        yield from self.match_conv1.named_params("match.conv1")
        yield from self.match_conv2.named_params("match.conv2")
        yield from self.loc_conv1.named_params("loc.conv1")
        yield from self.loc_conv2.named_params("loc.conv2")
        if self.quality_mode != "none":
            yield from self.quality_conv1.named_params("quality.conv1")
            yield from self.quality_conv2.named_params("quality.conv2")
            yield from self.quality_conv3.named_params("quality.conv3")

    def named_buffers(self):
        yield from self.match_conv1.named_buffers("match.conv1")
        yield from self.match_conv2.named_buffers("match.conv2")
        yield from self.loc_conv1.named_buffers("loc.conv1")
        yield from self.loc_conv2.named_buffers("loc.conv2")
        if self.quality_mode != "none":
            yield from self.quality_conv1.named_buffers("quality.conv1")
            yield from self.quality_conv2.named_buffers("quality.conv2")
            yield from self.quality_conv3.named_buffers("quality.conv3")


# -- losses -----------------------------------------------------------------------


@dataclass
class BatchTargets:
    """Per-batch dense supervision over the flattened pyramid (float32)."""

    match_labels: np.ndarray      # (B, total) 1 at selected positives
    selected: np.ndarray          # (B, total) bool
    distances: np.ndarray         # (B, total, 2) targets; zeros off-selection
    n_pos: np.ndarray             # (B,) selected positive counts
    gt_boxes: np.ndarray          # (B, 2) segment units


def _per_sample_weights(selected: np.ndarray, n_pos: np.ndarray) -> np.ndarray:
    """mask / (N_pos * B): summing loss * weight gives the batch mean of
    per-sample positive averages. Zero-positive rows contribute nothing."""
    b = selected.shape[0]
    denom = np.maximum(n_pos.astype(np.float64), 1.0)[:, None] * b
    return (selected / denom).astype(np.float32)


def _clamp_prob(p: Tensor) -> Tensor:
    return ad.clamp_min(ad.clamp_max(p, 1.0 - PROB_EPS), PROB_EPS)


def loss_location(distances: Tensor, targets: BatchTargets) -> Tensor:
    """Eq.-style IoU regression loss: batch mean over samples of
    (1/N_pos) sum over selected positives of -ln tIoU(pred, target),
    in the UnitBox distance form (both boxes share the location anchor)."""
    if not targets.n_pos.any():
        log.warning("loss_location: batch has no positive locations; contributing 0")
        return (distances * 0.0).sum()
    total = targets.match_labels.shape[1]
    p_s = distances.slice((slice(None), slice(None), slice(0, 1))).reshape((-1, total))
    p_e = distances.slice((slice(None), slice(None), slice(1, 2))).reshape((-1, total))
    t_s = ad.constant(targets.distances[..., 0])
    t_e = ad.constant(targets.distances[..., 1])
    inter = ad.minimum(p_s, t_s) + ad.minimum(p_e, t_e)
    union = p_s + p_e + t_s + t_e - inter
    iou = inter * ad.power(union, -1.0)
    per_loc = -ad.log(ad.clamp_min(iou, IOU_FLOOR))
    w = ad.constant(_per_sample_weights(targets.selected, targets.n_pos))
    return (per_loc * w).sum()


def focal_term(prob: Tensor, labels: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Per-location focal loss FL(p, y) on probabilities (not logits)."""
    y = ad.constant(labels.astype(np.float32))
    p = _clamp_prob(prob)
    pos = ad.power(1.0 - p, gamma) * (-ad.log(p)) * y * alpha
    neg = ad.power(p, gamma) * (-ad.log(1.0 - p)) * (1.0 - y) * (1.0 - alpha)
    return pos + neg


def loss_matching(match_prob: Tensor, targets: BatchTargets,
                  alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Focal loss over ALL locations, normalized per sample by N_pos
    (by 1 when the sample has no positives), then batch-averaged."""
    if not targets.n_pos.any():
        log.warning("loss_matching: batch has no positive locations; normalizing by 1")
    per_loc = focal_term(match_prob, targets.match_labels, alpha, gamma)
    b = targets.match_labels.shape[0]
    denom = np.maximum(targets.n_pos.astype(np.float64), 1.0)[:, None] * b
    w = ad.constant((np.ones_like(targets.match_labels) / denom).astype(np.float32))
    return (per_loc * w).sum()


def smooth_l1(x: Tensor) -> Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (beta = 1)."""
    a = ad.absolute(x)
    overflow = ad.relu(a - 1.0)
    capped = a - overflow
    return capped * capped * 0.5 + overflow


def loss_iou(quality: Tensor, u_targets: np.ndarray, positives: np.ndarray | None = None,
             mean: bool = False) -> Tensor:
    """Smooth-L1 between predicted and realized IoU, summed over locations as
    written (per-sample), batch-averaged; `mean` switches to a per-sample mean,
    `positives` restricts the sum to the given mask."""
    diff = quality - ad.constant(u_targets.astype(np.float32))
    per_loc = smooth_l1(diff)
    b, total = u_targets.shape
    if positives is not None:
        per_loc = per_loc * ad.constant(positives.astype(np.float32))
        count = max(float(positives.sum()), 1.0) if mean else float(b)
    else:
        count = float(b * total) if mean else float(b)
    return per_loc.sum() * (1.0 / count)


def loss_centerness(quality: Tensor, targets: BatchTargets) -> Tensor:
    """Mean binary cross-entropy over selected positives, batch-averaged."""
    if not targets.n_pos.any():
        log.warning("loss_centerness: batch has no positive locations; contributing 0")
        return (quality * 0.0).sum()
    c_t = np.zeros_like(targets.match_labels, dtype=np.float64)
    sel = targets.selected
    c_t[sel] = centerness_target(targets.distances[sel])
    c = ad.constant(c_t.astype(np.float32))
    p = _clamp_prob(quality)
    bce = -(c * ad.log(p) + (1.0 - c) * ad.log(1.0 - p))
    w = ad.constant(_per_sample_weights(targets.selected, targets.n_pos))
    return (bce * w).sum()


def iou_quality_targets(distances: np.ndarray, geom: PyramidGeometry, gt_boxes: np.ndarray) -> np.ndarray:
    """Realized tIoU of each (detached) decoded box against its sample's gt;
    used as the regression target for the quality head."""
    boxes = decode_boxes(distances.astype(np.float64), geom.flat_coords[None, :], geom.segments)
    return temporal_iou(boxes, np.asarray(gt_boxes, dtype=np.float64)[:, None, :])
