"""Three-step training engine.

Stage 1 trains everything except the quality head on the location + matching
losses; stage 2 trains only the quality head (IoU regression or the centerness
baseline) with everything else fixed: parameters frozen and batchnorm on
running statistics; stage 3 fine-tunes all groups jointly. Positive-sampling
strategies (All / Half / Random / Center) subsample each sample's positive
locations per step; deselected positives drop out of the location loss and
become matching-head negatives.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ComputationTape
from .config import EvalConfig, ModelConfig, TrainConfig, model_digest
from .dataio import Dataset, Sample, batch_arrays
from .evaluate import predict_dataset, recall_at, top_n
from .grounding import (
    BatchTargets,
    PyramidGeometry,
    assign_targets,
    iou_quality_targets,
    loss_centerness,
    loss_iou,
    loss_location,
    loss_matching,
)
from .model import DrnModel

log = logging.getLogger(__name__)

STAGE_GROUPS = {1: {"g", "match", "loc"}, 2: {"quality"}, 3: {"g", "match", "loc", "quality"}}


def stage_learning_rate(cfg: TrainConfig, stage: int) -> float:
    return {1: cfg.lr_stage1, 2: cfg.lr_stage2, 3: cfg.lr_stage3}[stage]


# -- positive sampling -------------------------------------------------------------


def select_positives(strategy: str, positive: np.ndarray, gt: tuple[float, float],
                     geom: PyramidGeometry, rng: np.random.Generator) -> np.ndarray:
    """Subset of one sample's positive-location mask per the strategy."""
    pos_idx = np.nonzero(positive)[0]
    selected = np.zeros_like(positive)
    if pos_idx.size == 0:
        log.warning("select_positives: sample has no positive locations")
        return selected
    if strategy == "All":
        return positive.copy()
    if strategy == "Half":
        keep = -(-pos_idx.size // 2)  # ceil, never drops to zero
        chosen = rng.choice(pos_idx, size=keep, replace=False)
        selected[chosen] = True
        return selected
    if strategy == "Random":
        selected[rng.choice(pos_idx)] = True
        return selected
    if strategy == "Center":
        midpoint = 0.5 * (gt[0] + gt[1])
        dist = np.abs(geom.flat_coords[pos_idx] - midpoint)
        selected[pos_idx[int(np.argmin(dist))]] = True  # argmin tie -> earlier location
        return selected
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def build_batch_targets(geom: PyramidGeometry, gts: np.ndarray, strategy: str,
                        rng: np.random.Generator) -> BatchTargets:
    b = gts.shape[0]
    selected = np.zeros((b, geom.total), dtype=bool)
    distances = np.zeros((b, geom.total, 2), dtype=np.float64)
    n_pos = np.zeros(b, dtype=np.int64)
    for i in range(b):
        ta = assign_targets(geom, (gts[i, 0], gts[i, 1]))
        sel = select_positives(strategy, ta.positive, (gts[i, 0], gts[i, 1]), geom, rng)
        selected[i] = sel
        distances[i][sel] = ta.distances[sel]
        n_pos[i] = int(sel.sum())
    return BatchTargets(
        match_labels=selected.astype(np.float32),
        selected=selected,
        distances=distances,
        n_pos=n_pos,
        gt_boxes=gts.astype(np.float64),
    )


# -- trainer --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss_total: float
    loss_loc: float
    loss_match: float
    loss_quality: float
    val_recall: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: dict[str, Path] = field(default_factory=dict)


class Trainer:
    def __init__(self, model: DrnModel, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                 train_data: Dataset, val_data: Dataset | None, seed: int):
        self.model = model
        self.cfg = train_cfg
        self.eval_cfg = eval_cfg
        self.train_data = train_data
        self.val_data = val_data
        self.rng = np.random.default_rng([seed, 0x7247])
        self.adam = AdamState.for_params(model.params, lr=train_cfg.lr_stage1)
        self.stage = 1
        self.epoch_in_stage = 0
        self.global_step = 0

    # -- one optimization step --

    def training_step(self, samples: list[Sample], stage: int) -> dict[str, float]:
        cfg = self.cfg
        model = self.model
        groups = self._stage_groups(stage)
        model.set_requires_grad(groups)
        self.adam.lr = stage_learning_rate(cfg, stage)
        feats, ids, mask, gts = batch_arrays(samples)
        targets = build_batch_targets(model.geometry, gts, cfg.sampling, self.rng)
        train_mode = stage != 2  # stage 2 runs the frozen trunk in eval mode

        values = {"loc": 0.0, "match": 0.0, "quality": 0.0}
        with ComputationTape() as tape:
            outputs = model.forward(feats, ids, mask, train=train_mode, with_quality=stage != 1)
            terms = []
            if stage in (1, 3):
                l_loc = loss_location(outputs.distances, targets)
                l_match = loss_matching(outputs.match_prob, targets)
                terms.append(l_loc * cfg.loss_weight_loc)
                terms.append(l_match * cfg.loss_weight_match)
                values["loc"] = l_loc.item()
                values["match"] = l_match.item()
            if stage in (2, 3) and outputs.quality is not None:
                l_q = self._quality_loss(outputs, targets)
                terms.append(l_q * cfg.loss_weight_quality)
                values["quality"] = l_q.item()
            if not terms:
                raise ValueError(f"stage {stage} has no trainable loss terms (quality head off?)")
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            grads = ad.backward(loss, tape)

        update = model.trainable_names(groups)
        if cfg.grad_clip > 0:
            grads = ad.clip_gradients(grads, {n: model.params[n] for n in update}, cfg.grad_clip)
        ad.adam_step(model.params, grads, self.adam, update=update)
        self.global_step += 1
        values["total"] = loss.item()
        return values

    def _quality_loss(self, outputs, targets: BatchTargets):
        if self.model.cfg.quality_head == "centerness":
            return loss_centerness(outputs.quality, targets)
        u = iou_quality_targets(outputs.distances.data, self.model.geometry, targets.gt_boxes)
        positives = targets.selected if self.cfg.iou_positives_only else None
        return loss_iou(outputs.quality, u, positives=positives, mean=self.cfg.iou_loss_mean)

    def _stage_groups(self, stage: int) -> set[str]:
        groups = set(STAGE_GROUPS[stage])
        if self.model.cfg.quality_head == "none":
            groups.discard("quality")
        return groups

    def _stage_epochs(self, stage: int) -> int:
        budget = {1: self.cfg.epochs_stage1, 2: self.cfg.epochs_stage2, 3: self.cfg.epochs_stage3}[stage]
        if stage == 2 and self.model.cfg.quality_head == "none":
            return 0  # nothing to train
        return budget

    # -- epoch / stage loops --

    def train_epoch(self, stage: int) -> dict[str, float]:
        order = self.rng.permutation(len(self.train_data.samples))
        sums = {"total": 0.0, "loc": 0.0, "match": 0.0, "quality": 0.0}
        steps = 0
        bs = self.cfg.batch_size
        for lo in range(0, len(order), bs):
            batch = [self.train_data.samples[i] for i in order[lo : lo + bs]]
            values = self.training_step(batch, stage)
            for key in sums:
                sums[key] += values[key]
            steps += 1
        return {key: total / max(steps, 1) for key, total in sums.items()}

    def validate(self) -> float:
        if self.val_data is None or not self.val_data.samples:
            return float("nan")
        cands = predict_dataset(self.model, self.val_data.samples)
        preds = [top_n(c, 1, self.eval_cfg.nms_threshold) for c in cands]
        gts = [s.gt_segments for s in self.val_data.samples]
        return recall_at(preds, gts, 1, 0.5)

    def run(self, out_dir=None, resume_stage: int = 1, resume_epoch: int = 0) -> TrainResult:
        result = TrainResult()
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        for stage in (1, 2, 3):
            if stage < resume_stage:
                continue
            self.stage = stage
            start_epoch = resume_epoch if stage == resume_stage else 0
            total_epochs = self._stage_epochs(stage)
            for epoch in range(start_epoch, total_epochs):
                self.epoch_in_stage = epoch
                losses = self.train_epoch(stage)
                val = self.validate()
                record = EpochRecord(stage, epoch, losses["total"], losses["loc"],
                                     losses["match"], losses["quality"], val)
                result.history.append(record)
                log.info(
                    "stage %d epoch %d: loss %.4f (loc %.4f match %.4f quality %.4f) val R@1@0.5 %.2f",
                    stage, epoch, record.loss_total, record.loss_loc, record.loss_match,
                    record.loss_quality, record.val_recall,
                )
            self.epoch_in_stage = total_epochs
            if out_dir is not None:
                path = out_dir / f"checkpoint_stage{stage}.drnc"
                checkpoint_save(path, self.model, self.adam, stage, total_epochs,
                                self.global_step, self.rng)
                result.checkpoints[f"stage{stage}"] = path
        if out_dir is not None:
            final = out_dir / "checkpoint_final.drnc"
            checkpoint_save(final, self.model, self.adam, 3, self._stage_epochs(3),
                            self.global_step, self.rng)
            result.checkpoints["final"] = final
        return result


def train_three_step(model: DrnModel, train_cfg: TrainConfig, eval_cfg: EvalConfig,
                     train_data: Dataset, val_data: Dataset | None, seed: int,
                     out_dir=None) -> TrainResult:
    if not train_data.samples:
        raise ValueError("training dataset is empty")
    trainer = Trainer(model, train_cfg, eval_cfg, train_data, val_data, seed)
    return trainer.run(out_dir=out_dir)


# -- checkpoint codec ---------------------------------------------------------------


CHECKPOINT_MAGIC = b"DRNC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", payload.ndim))
    fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
    fh.write(payload.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError(f"checkpoint {self.path} truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_entry(reader: _Reader) -> tuple[str, np.ndarray]:
    name = reader.take(reader.u32()).decode("utf-8")
    rank = reader.u32()
    dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
    count = 1
    for d in dims:
        count *= d
    data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims).copy()
    return name, data


def checkpoint_save(path, model: DrnModel, adam: AdamState, stage: int, epoch_in_stage: int,
                    global_step: int, rng: np.random.Generator) -> None:
    arrays = model.state_arrays()
    moments = {}
    for name in sorted(adam.m):
        moments[f"m.{name}"] = adam.m[name]
        moments[f"v.{name}"] = adam.v[name]
    rng_payload = json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(model_digest(model.cfg))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_entry(fh, name, arrays[name])
        fh.write(struct.pack("<I", len(moments)))
        for name in sorted(moments):
            _write_entry(fh, name, moments[name])
        fh.write(struct.pack("<IIQQ", stage, epoch_in_stage, global_step, adam.step))
        fh.write(struct.pack("<I", len(rng_payload)))
        fh.write(rng_payload)


@dataclass
class CheckpointData:
    digest: bytes
    arrays: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    stage: int
    epoch_in_stage: int
    global_step: int
    adam_step: int
    rng_state: dict


def checkpoint_load(path) -> CheckpointData:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(blob, path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint {path} has bad magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported version {version}")
    digest = reader.take(32)
    arrays = dict(_read_entry(reader) for _ in range(reader.u32()))
    moments = dict(_read_entry(reader) for _ in range(reader.u32()))
    stage, epoch_in_stage = struct.unpack("<II", reader.take(8))
    global_step, adam_step = struct.unpack("<QQ", reader.take(16))
    rng_state = json.loads(reader.take(reader.u32()).decode("utf-8"))
    if reader.pos != len(blob):
        raise CheckpointError(f"checkpoint {path} has {len(blob) - reader.pos} trailing bytes")
    return CheckpointData(digest, arrays, moments, stage, epoch_in_stage,
                          global_step, adam_step, rng_state)


def restore_model(model: DrnModel, data: CheckpointData) -> None:
    if data.digest != model_digest(model.cfg):
        log.warning("checkpoint model-config digest differs from the configured model")
    try:
        model.load_state_arrays(data.arrays)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def restore_trainer(trainer: Trainer, data: CheckpointData) -> tuple[int, int]:
    """Restore params, optimizer, rng, and counters; returns (stage, epoch) to
    resume from (training continues at the next epoch boundary)."""
    restore_model(trainer.model, data)
    for name in trainer.adam.m:
        key_m, key_v = f"m.{name}", f"v.{name}"
        if key_m not in data.moments:
            raise CheckpointError(f"checkpoint is missing optimizer moment {key_m!r}")
        trainer.adam.m[name] = data.moments[key_m].astype(np.float32)
        trainer.adam.v[name] = data.moments[key_v].astype(np.float32)
    trainer.adam.step = data.adam_step
    trainer.global_step = data.global_step
    trainer.rng.bit_generator.state = data.rng_state
    trainer.stage = data.stage
    trainer.epoch_in_stage = data.epoch_in_stage
    return data.stage, data.epoch_in_stage


def build_model_for_dataset(model_cfg: ModelConfig, dataset: Dataset, seed: int) -> DrnModel:
    import dataclasses

    cfg = dataclasses.replace(
        model_cfg,
        vocab_size=len(dataset.vocab),
        segments=dataset.segments,
        feature_dim=dataset.feature_dim,
    )
    return DrnModel(cfg, seed)
