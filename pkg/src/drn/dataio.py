"""Dataset manifest (JSON) and the DRNF binary feature codec.

DRNF layout: magic "DRNF", version u32, K u32, c u32, then K*c little-endian
float32 values, row-major (time-major). Total size is exactly 16 + 4*K*c bytes.

Ground truth lives in seconds in the manifest and is converted to segment time
at load: seg = (seconds / duration) * K.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"DRNF"
FEATURE_VERSION = 1


class CodecError(Exception):
    pass


class DatasetError(Exception):
    pass


def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise CodecError(f"features must be 2-D (K, c), got shape {arr.shape}")
    k, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, k, c))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CodecError(f"cannot read feature file {path}: {exc}") from exc
    if len(blob) < 16:
        raise CodecError(f"feature file {path} truncated: {len(blob)} bytes < 16-byte header")
    if blob[:4] != FEATURE_MAGIC:
        raise CodecError(f"feature file {path} has bad magic {blob[:4]!r}")
    version, k, c = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise CodecError(f"feature file {path} has unsupported version {version}")
    expected = 16 + 4 * k * c
    if len(blob) != expected:
        raise CodecError(f"feature file {path} has {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(k, c).copy()


@dataclass
class Sample:
    sid: str
    features: np.ndarray          # (K, c) float32
    duration: float               # seconds
    tokens: list[str]
    token_ids: np.ndarray         # (N,) int64
    gt_seconds: tuple[float, float]
    gt_segments: tuple[float, float]
    kind: str = "plain"           # plain | temporal


@dataclass
class Dataset:
    vocab: list[str]
    token_to_id: dict[str, int]
    segments: int
    feature_dim: int
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


def write_manifest(out_dir, vocab: list[str], segments: int, feature_dim: int,
                   samples_by_split: dict[str, list[dict]]) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    payload = {
        "version": 1,
        "segments": segments,
        "feature_dim": feature_dim,
        "vocab": vocab,
        "samples": {split: samples_by_split.get(split, []) for split in SPLITS},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(manifest_path, split: str) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    vocab = list(payload["vocab"])
    token_to_id = {tok: i for i, tok in enumerate(vocab)}
    segments = int(payload["segments"])
    feature_dim = int(payload["feature_dim"])
    base = manifest_path.parent

    seen_ids: set[str] = set()
    samples: list[Sample] = []
    for rec in payload["samples"][split]:
        sid = rec["id"]
        if sid in seen_ids:
            raise DatasetError(f"duplicate sample id {sid!r}")
        seen_ids.add(sid)
        duration = float(rec["duration"])
        start_s, end_s = float(rec["gt"][0]), float(rec["gt"][1])
        if not (0.0 <= start_s < end_s <= duration):
            raise DatasetError(f"sample {sid!r}: gt ({start_s}, {end_s}) outside [0, {duration}]")
        tokens = list(rec["tokens"])
        if not tokens:
            raise DatasetError(f"sample {sid!r} has an empty query")
        try:
            ids = np.asarray([token_to_id[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"sample {sid!r}: unknown token {exc.args[0]!r}") from exc
        feats = read_features(base / rec["feature_file"])
        if feats.shape != (segments, feature_dim):
            raise DatasetError(
                f"sample {sid!r}: feature shape {feats.shape} != ({segments}, {feature_dim})"
            )
        scale = segments / duration
        samples.append(
            Sample(
                sid=sid,
                features=feats,
                duration=duration,
                tokens=tokens,
                token_ids=ids,
                gt_seconds=(start_s, end_s),
                gt_segments=(start_s * scale, end_s * scale),
                kind=rec.get("kind", "plain"),
            )
        )
    return Dataset(vocab=vocab, token_to_id=token_to_id, segments=segments,
                   feature_dim=feature_dim, samples=samples)


def batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pack samples into padded batch arrays: features (B, K, c), token ids
    (B, N_max) with pad id 0, mask (B, N_max), gt boxes (B, 2) segment units."""
    b = len(samples)
    n_max = max(len(s.token_ids) for s in samples)
    feats = np.stack([s.features for s in samples]).astype(np.float32)
    ids = np.zeros((b, n_max), dtype=np.int64)
    mask = np.zeros((b, n_max), dtype=np.float32)
    gts = np.zeros((b, 2), dtype=np.float64)
    for i, s in enumerate(samples):
        n = len(s.token_ids)
        ids[i, :n] = s.token_ids
        mask[i, :n] = 1.0
        gts[i] = s.gt_segments
    return feats, ids, mask, gts
