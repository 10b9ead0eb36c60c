"""Decoding dense predictions into ranked temporal boxes, top-n selection with
greedy NMS, the R@n/IoU=m recall metric, and the best-location analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataio import Sample, batch_arrays
from .grounding import HeadOutputs, PyramidGeometry, decode_boxes, temporal_iou


@dataclass
class Candidate:
    start: float
    end: float
    score: float
    level: int     # 1-based pyramid level
    index: int     # location index within the level

    @property
    def box(self) -> tuple[float, float]:
        return (self.start, self.end)


def _flat_level_index(geom: PyramidGeometry) -> list[tuple[int, int]]:
    out = []
    for level, size in enumerate(geom.sizes, start=1):
        out.extend((level, j) for j in range(size))
    return out


def decode_candidates(outputs: HeadOutputs, geom: PyramidGeometry) -> list[list[Candidate]]:
    """One candidate per (level, location) per sample; score is match * quality
    when a quality head exists, plain match otherwise. Boxes clamp to [0, K]."""
    dist = np.asarray(outputs.distances.data, dtype=np.float64)
    match = np.asarray(outputs.match_prob.data, dtype=np.float64)
    score = match if outputs.quality is None else match * np.asarray(outputs.quality.data, dtype=np.float64)
    boxes = decode_boxes(dist, geom.flat_coords[None, :], geom.segments)
    level_index = _flat_level_index(geom)
    batches = []
    for b in range(dist.shape[0]):
        batches.append(
            [
                Candidate(float(boxes[b, j, 0]), float(boxes[b, j, 1]), float(score[b, j]), lvl, idx)
                for j, (lvl, idx) in enumerate(level_index)
            ]
        )
    return batches


def top_n(candidates: list[Candidate], n: int, nms_threshold: float = 0.5) -> list[Candidate]:
    """Sort by score, greedily keep boxes whose tIoU with every kept box is
    below the threshold, then pad by score from the suppressed remainder."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidates:
        raise ValueError("empty candidate list")
    ranked = sorted(candidates, key=lambda c: (-c.score, c.level, c.index))
    kept: list[Candidate] = []
    suppressed: list[Candidate] = []
    for cand in ranked:
        if len(kept) == n:
            break
        if all(temporal_iou(cand.box, k.box) < nms_threshold for k in kept):
            kept.append(cand)
        else:
            suppressed.append(cand)
    if len(kept) < n:
        kept.extend(suppressed[: n - len(kept)])
    return kept


def recall_at(predictions: list[list], gts: list, n: int, m: float) -> float:
    """Percentage of samples whose top-n predictions contain at least one box
    with tIoU strictly greater than m.

    `predictions` holds per-sample ranked box lists (anything with start/end
    as the first two entries or a Candidate)."""
    if not predictions:
        raise ValueError("no samples to evaluate")
    hits = 0
    for boxes, gt in zip(predictions, gts):
        if not boxes:
            raise ValueError("a sample has no predictions")
        for box in boxes[:n]:
            pair = box.box if isinstance(box, Candidate) else (box[0], box[1])
            if temporal_iou(pair, gt) > m:
                hits += 1
                break
    return 100.0 * hits / len(predictions)


def recall_grid(predictions: list[list], gts: list, top_ns, thresholds) -> dict[tuple[int, float], float]:
    return {(n, m): recall_at(predictions, gts, n, m) for n in top_ns for m in thresholds}


def format_recall_grid(grid: dict[tuple[int, float], float]) -> str:
    lines = [f"R@{n} IoU={m:g}  {value:.2f}" for (n, m), value in sorted(grid.items())]
    return "\n".join(lines)


def best_location_histogram(candidate_lists: list[list[Candidate]], gts: list) -> dict[str, float]:
    """Distribution of where the best-IoU location falls inside the ground
    truth, thirds plus an overflow bin for locations outside it, normalized."""
    geom_bins = np.zeros(4, dtype=np.int64)
    for cands, gt in zip(candidate_lists, gts):
        ious = np.asarray([temporal_iou(c.box, gt) for c in cands])
        best = cands[int(np.argmax(ious))]
        coord = (best.index + 0.5) * (2 ** (best.level - 1))
        rel = (coord - gt[0]) / (gt[1] - gt[0])
        if rel < 0.0 or rel > 1.0:
            geom_bins[3] += 1
        elif rel < 1.0 / 3.0:
            geom_bins[0] += 1
        elif rel < 2.0 / 3.0:
            geom_bins[1] += 1
        else:
            geom_bins[2] += 1
    total = max(int(geom_bins.sum()), 1)
    return {
        "first_third": geom_bins[0] / total,
        "middle_third": geom_bins[1] / total,
        "last_third": geom_bins[2] / total,
        "outside": geom_bins[3] / total,
    }


def per_sample_best_iou(candidate_lists: list[list[Candidate]], gts: list) -> list[float]:
    """The best achievable tIoU among each sample's candidates."""
    return [
        float(max(temporal_iou(c.box, gt) for c in cands))
        for cands, gt in zip(candidate_lists, gts)
    ]


def predict_dataset(model, samples: list[Sample], batch_size: int = 64) -> list[list[Candidate]]:
    """Eval-mode forward over a dataset, returning per-sample candidates."""
    out: list[list[Candidate]] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        feats, ids, mask, _ = batch_arrays(chunk)
        outputs = model.forward(feats, ids, mask, train=False)
        out.extend(decode_candidates(outputs, model.geometry))
    return out


def dump_predictions_jsonl(path, samples: list[Sample], topn_boxes: list[list[Candidate]]) -> None:
    """One JSON record per sample: id plus (start, end, score) in seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample, boxes in zip(samples, topn_boxes):
            scale = sample.duration / len(sample.features)
            rec = {
                "id": sample.sid,
                "predictions": [
                    [round(c.start * scale, 6), round(c.end * scale, 6), round(c.score, 6)]
                    for c in boxes
                ],
            }
            fh.write(json.dumps(rec) + "\n")
