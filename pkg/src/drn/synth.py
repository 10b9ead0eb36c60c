"""Synthetic grounding-task generator and the non-learned signature oracle.

Each video is K segments of c-dim features: gaussian noise plus, on segments
covered by an event, that event word's fixed signature vector. Plain queries
name one event (template + event word); temporal queries name an event word
that occurs twice and disambiguate by relation to a second event ("A after B"
/ "A before B"), so they are solvable only with temporal position.

The matched-filter oracle scores every contiguous run by
sum_t <f_t, sig> - 0.5 * ||sig||^2 * len and takes the argmax: on noiseless
data each in-event segment contributes +0.5||sig||^2 and each background
segment -0.5||sig||^2, so the exact event interval is the unique maximum.
With duplicated equal-length occurrences the two runs tie and the oracle
cannot beat chance, which is the point of the temporal subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .dataio import Sample, write_features, write_manifest

PAD_TOKEN = "<pad>"
TEMPLATE_TOKENS = ("find", "the", "moment", "person", "starts", "to")
TEMPORAL_WORDS = ("before", "after", "while", "then")
TEMPLATES = (
    ("find", "the", "moment"),
    ("the", "person", "starts", "to"),
    ("moment", "to",),
)


def event_vocabulary(num_event_words: int) -> list[str]:
    return [f"ev{i:02d}" for i in range(num_event_words)]


def build_vocab(cfg: SynthConfig) -> list[str]:
    vocab = [PAD_TOKEN]
    vocab.extend(sorted(set(TEMPLATE_TOKENS)))
    vocab.extend(TEMPORAL_WORDS)
    vocab.extend(event_vocabulary(cfg.num_event_words))
    return vocab


def event_signatures(cfg: SynthConfig, seed: int) -> dict[str, np.ndarray]:
    """Fixed per-word signature vectors, derived from the dataset seed."""
    rng = np.random.default_rng([seed, 0x516])
    return {
        word: rng.normal(size=cfg.feature_dim).astype(np.float32)
        for word in event_vocabulary(cfg.num_event_words)
    }


@dataclass
class Event:
    word: str
    start: int  # segment index, inclusive
    end: int    # segment index, exclusive


def _place_nonoverlapping(rng, lengths: list[int], segments: int) -> list[tuple[int, int]] | None:
    """Random non-overlapping placement preserving order; None if infeasible."""
    total = sum(lengths)
    slack = segments - total
    if slack < 0:
        return None
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    spans = []
    cursor = 0
    prev_cut = 0
    for length, cut in zip(lengths, cuts):
        cursor += int(cut - prev_cut)
        prev_cut = cut
        spans.append((cursor, cursor + length))
        cursor += length
    return spans


def _gen_events(rng, cfg: SynthConfig, words: list[str], temporal: bool) -> tuple[list[Event], dict]:
    if temporal:
        # A ... B ... A with equal-length A occurrences: the first A lands in
        # the first third of the timeline, the second in the last third, with B
        # strictly between them, so resolving the query requires temporal
        # position rather than nearby-context matching
        word_a, word_b = (str(w) for w in rng.choice(words, size=2, replace=False))
        k = cfg.segments
        third = k // 3
        len_a = int(rng.integers(cfg.event_len_min, min(cfg.event_len_max, third) + 1))
        len_b = int(rng.integers(cfg.event_len_min, min(cfg.event_len_max, third) + 1))
        a1_start = int(rng.integers(0, third - len_a + 1))
        a2_start = int(rng.integers(k - third, k - len_a + 1))
        b_start = int(rng.integers(a1_start + len_a, a2_start - len_b + 1))
        events = [
            Event(word_a, a1_start, a1_start + len_a),
            Event(word_b, b_start, b_start + len_b),
            Event(word_a, a2_start, a2_start + len_a),
        ]
        relation = str(rng.choice(["before", "after"]))
        target = events[0] if relation == "before" else events[2]
        meta = {"relation": relation, "word_a": word_a, "word_b": word_b, "target": target}
        return events, meta
    n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    chosen = [str(w) for w in rng.choice(words, size=n_events, replace=False)]
    lengths = [int(rng.integers(cfg.event_len_min, cfg.event_len_max + 1)) for _ in range(n_events)]
    spans = _place_nonoverlapping(rng, lengths, cfg.segments)
    if spans is None:
        raise ValueError("events cannot fit in the configured segment count")
    events = [Event(w, *span) for w, span in zip(chosen, spans)]
    target = events[int(rng.integers(0, n_events))]
    return events, {"target": target}


def _render_features(rng, cfg: SynthConfig, events: list[Event], sigs: dict[str, np.ndarray]) -> np.ndarray:
    feats = rng.normal(scale=cfg.noise_std, size=(cfg.segments, cfg.feature_dim)).astype(np.float32)
    for ev in events:
        feats[ev.start : ev.end] += sigs[ev.word]
    return feats


def generate_dataset(cfg: SynthConfig, seed: int, out_dir) -> Path:
    """Write manifest + feature files + signatures; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(cfg)
    words = event_vocabulary(cfg.num_event_words)
    sigs = event_signatures(cfg, seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    duration = cfg.segments * cfg.seconds_per_segment

    counts = {"train": cfg.num_train, "val": cfg.num_val, "test": cfg.num_test}
    by_split: dict[str, list[dict]] = {}
    for split, count in counts.items():
        records = []
        for i in range(count):
            sid = f"{split}-{i:05d}"
            temporal = bool(rng.uniform() < cfg.temporal_fraction)
            events, meta = _gen_events(rng, cfg, words, temporal)
            feats = _render_features(rng, cfg, events, sigs)
            rel_path = f"features/{sid}.drnf"
            write_features(out_dir / rel_path, feats)
            template = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
            target: Event = meta["target"]
            if temporal:
                tokens = list(template) + [meta["word_a"], meta["relation"], meta["word_b"]]
            else:
                tokens = list(template) + [target.word]
            gt_sec = (target.start * cfg.seconds_per_segment, target.end * cfg.seconds_per_segment)
            records.append(
                {
                    "id": sid,
                    "feature_file": rel_path,
                    "duration": duration,
                    "tokens": tokens,
                    "gt": [gt_sec[0], gt_sec[1]],
                    "kind": "temporal" if temporal else "plain",
                }
            )
        by_split[split] = records

    with open(out_dir / "signatures.json", "w", encoding="utf-8") as fh:
        json.dump({w: [float(v) for v in vec] for w, vec in sigs.items()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return write_manifest(out_dir, vocab, cfg.segments, cfg.feature_dim, by_split)


def load_signatures(dataset_dir) -> dict[str, np.ndarray]:
    with open(Path(dataset_dir) / "signatures.json", "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {w: np.asarray(v, dtype=np.float32) for w, v in raw.items()}


def queried_event_word(tokens: list[str]) -> str:
    """The event word a query asks for (the first event token)."""
    for tok in tokens:
        if tok.startswith("ev"):
            return tok
    raise ValueError(f"no event word in query {tokens}")


def signature_oracle_box(features: np.ndarray, signature: np.ndarray) -> tuple[float, float]:
    """Best contiguous run under the matched-filter score, in segment units.

    Ties break toward the earlier, then shorter, run; deterministic, and
    deliberately position-blind.
    """
    k = features.shape[0]
    gains = features.astype(np.float64) @ signature.astype(np.float64)
    penalty = 0.5 * float(signature.astype(np.float64) @ signature.astype(np.float64))
    best = (-np.inf, 0, 1)
    prefix = np.concatenate([[0.0], np.cumsum(gains - penalty)])
    for start in range(k):
        for end in range(start + 1, k + 1):
            score = prefix[end] - prefix[start]
            if score > best[0] + 1e-12:
                best = (score, start, end)
    return float(best[1]), float(best[2])


def oracle_predictions(samples: list[Sample], signatures: dict[str, np.ndarray]) -> list[tuple[float, float]]:
    out = []
    for s in samples:
        word = queried_event_word(s.tokens)
        out.append(signature_oracle_box(s.features, signatures[word]))
    return out
