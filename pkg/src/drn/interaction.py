"""Multi-level video-query interaction: query encoding, per-level textual
attention, temporal location embedding, element-wise fusion, strided backbone
downsampling, and FPN top-down merging.

Timeline convention: location index j at level i (stride s_i = 2^(i-1)) sits
at segment-time (j + 0.5) * s_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import BiLstm, Conv1dBlock, Conv1dBlockSpec, Linear, uniform_init


@dataclass
class QueryEncoding:
    """Per-word bi-LSTM hiddens (B, N, 2H), projected global feature (B, 2H),
    and the validity mask (B, N)."""

    hiddens: Tensor
    global_feat: Tensor
    mask: np.ndarray


def location_coordinates(segments: int) -> np.ndarray:
    """Raw per-segment temporal coordinates [(t-0.5)/T, (t+0.5)/T, 1/T] for
    t = 1..T, float64 (K, 3)."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    t = np.arange(1, segments + 1, dtype=np.float64)
    return np.stack([(t - 0.5) / segments, (t + 0.5) / segments, np.full_like(t, 1.0 / segments)], axis=1)


def upsample_nearest_x2(x: Tensor) -> Tensor:
    """Repeat each time step twice: (B, T, C) -> (B, 2T, C)."""
    b, t, c = x.shape
    return ad.broadcast(x.reshape((b, t, 1, c)), (b, t, 2, c)).reshape((b, 2 * t, c))


class QueryEncoder:
    """Learned word embeddings -> BiLSTM -> per-word hiddens and global g.

    g is [h_1 ; h_N] (4H) passed through a learned projection to 2H so the
    attention chain sees one uniform width.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.vocab_size < 1:
            raise ValueError("vocab_size must be set before building the encoder")
        self.vocab_size = cfg.vocab_size
        self.embedding = ad.parameter(uniform_init(rng, (cfg.vocab_size, cfg.word_dim), cfg.word_dim))
        self.bilstm = BiLstm(cfg.word_dim, cfg.lstm_hidden, rng)
        self.g_proj = Linear(4 * cfg.lstm_hidden, 2 * cfg.lstm_hidden, rng)

    def __call__(self, token_ids: np.ndarray, mask: np.ndarray) -> QueryEncoding:
        if token_ids.ndim != 2 or token_ids.shape[1] < 1:
            raise ValueError("queries must be a non-empty (B, N) id array")
        if token_ids.min() < 0 or token_ids.max() >= self.vocab_size:
            bad = int(token_ids.min()) if token_ids.min() < 0 else int(token_ids.max())
            raise ValueError(f"unknown token id {bad} (vocabulary size {self.vocab_size})")
        if (mask.sum(axis=1) < 1).any():
            raise ValueError("every query needs at least one valid token")
        b, n = token_ids.shape
        onehot = np.zeros((b, n, self.vocab_size), dtype=np.float32)
        onehot[np.arange(b)[:, None], np.arange(n)[None, :], token_ids] = 1.0
        embedded = ad.constant(onehot) @ self.embedding
        hiddens, g_raw = self.bilstm(embedded, mask)
        return QueryEncoding(hiddens=hiddens, global_feat=self.g_proj(g_raw), mask=mask)

    def named_params(self, prefix: str):
        yield f"{prefix}.embedding", self.embedding
        yield from self.bilstm.named_params(f"{prefix}.bilstm")
        yield from self.g_proj.named_params(f"{prefix}.g_proj")


class TextualAttention:
    """Per-level attention over query words.

    alpha_{i,n} = Softmax_n( W1( h_n * (W2_i ReLU(W3 g)) ) ), with W1/W3 shared
    across levels and W2 learned per level; q_i = sum_n alpha_{i,n} h_n.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        width = 2 * cfg.lstm_hidden
        self.w3 = Linear(width, width, rng)
        self.w2 = [Linear(width, width, rng) for _ in range(cfg.levels)]
        self.w1 = Linear(width, 1, rng)

    def __call__(self, level: int, enc: QueryEncoding) -> tuple[Tensor, Tensor]:
        """Returns (alpha (B, N), q (B, 2H)) for 1-based level index."""
        if not (1 <= level <= len(self.w2)):
            raise ValueError(f"level {level} out of range 1..{len(self.w2)}")
        b, n, width = enc.hiddens.shape
        guide = self.w2[level - 1](ad.relu(self.w3(enc.global_feat)))
        gated = enc.hiddens * guide.reshape((b, 1, width))
        logits = self.w1(gated).reshape((b, n))
        neg = ad.constant((enc.mask - 1.0) * 1e9)  # pad positions get -1e9
        alpha = ad.softmax(logits + neg, axis=1)
        q = (alpha.reshape((b, n, 1)) * enc.hiddens).sum(axis=1)
        return alpha, q

    def named_params(self, prefix: str):
        yield from self.w3.named_params(f"{prefix}.w3")
        for i, lin in enumerate(self.w2):
            yield from lin.named_params(f"{prefix}.w2_level{i + 1}")
        yield from self.w1.named_params(f"{prefix}.w1")


class InteractionModule:
    """Builds the fused vision-language feature pyramid {P_i}."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, k = cfg.channels, cfg.kernel_size
        self.encoder = QueryEncoder(cfg, rng)
        self.attention = TextualAttention(cfg, rng)
        self.q_to_channels = Linear(2 * cfg.lstm_hidden, c, rng)
        self.input_block = Conv1dBlock(
            Conv1dBlockSpec(cfg.feature_dim, c, kernel=k, batchnorm=True, relu=True), rng
        )
        # location embedding params exist regardless of the flag so the
        # ablation wiring check (outputs invariant when disabled) is meaningful
        self.loc_linear = Linear(3, cfg.location_embedding_dim, rng)
        self.loc_restore = Conv1dBlock(
            Conv1dBlockSpec(c + cfg.location_embedding_dim, c, kernel=1, batchnorm=True, relu=True), rng
        )
        self.down_blocks = [
            Conv1dBlock(Conv1dBlockSpec(c, c, kernel=k, stride=2, batchnorm=True, relu=True), rng)
            for _ in range(cfg.levels - 1)
        ]
        self.laterals = [Conv1dBlock(Conv1dBlockSpec(c, c, kernel=1), rng) for _ in range(cfg.levels)]
        self._loc_coords = location_coordinates(cfg.segments).astype(np.float32)

    # -- pieces (exposed for tests) --

    def query_features(self, enc: QueryEncoding) -> list[Tensor]:
        """Attended query feature per level, already projected to c channels."""
        cfg = self.cfg
        if not cfg.multi_level_fusion or cfg.mlf_same:
            _, q1 = self.attention(1, enc)
            q1c = self.q_to_channels(q1)
            return [q1c] * cfg.levels
        qs = []
        for level in range(1, cfg.levels + 1):
            _, q = self.attention(level, enc)
            qs.append(self.q_to_channels(q))
        return qs

    def fuse_level(self, m_i: Tensor, q_channels: Tensor) -> Tensor:
        b, t, c = m_i.shape
        return m_i * q_channels.reshape((b, 1, c))

    def add_location_embedding(self, fused: Tensor, train: bool) -> Tensor:
        b, t, _ = fused.shape
        emb = self.loc_linear(ad.constant(self._loc_coords))  # (K, D)
        emb_b = ad.broadcast(emb.reshape((1, t, emb.shape[-1])), (b, t, emb.shape[-1]))
        return self.loc_restore(ad.concat([fused, emb_b], axis=2), train)

    def build_pyramid(self, cs: list[Tensor], train: bool) -> list[Tensor]:
        """FPN top-down: P_L = lateral(C_L); P_i = lateral(C_i) + up2(P_{i+1})."""
        tops: list[Tensor] = [None] * len(cs)
        tops[-1] = self.laterals[-1](cs[-1], train)
        for i in range(len(cs) - 2, -1, -1):
            tops[i] = self.laterals[i](cs[i], train) + upsample_nearest_x2(tops[i + 1])
        return tops

    # -- full forward --

    def __call__(self, features: Tensor, token_ids: np.ndarray, mask: np.ndarray, train: bool) -> list[Tensor]:
        cfg = self.cfg
        if features.shape[1] != cfg.segments:
            raise ad.ShapeError(f"expected {cfg.segments} segments, got {features.shape[1]}")
        enc = self.encoder(token_ids, mask)
        qs = self.query_features(enc)

        m1 = self.input_block(features, train)
        fused1 = self.fuse_level(m1, qs[0])
        c1 = self.add_location_embedding(fused1, train) if cfg.location_embedding else fused1

        cs = [c1]
        for i in range(1, cfg.levels):
            m_i = self.down_blocks[i - 1](cs[-1], train)
            cs.append(self.fuse_level(m_i, qs[i]) if cfg.multi_level_fusion else m_i)
        return self.build_pyramid(cs, train)

    def named_params(self, prefix: str):
        yield from self.encoder.named_params(f"{prefix}.encoder")
        yield from self.attention.named_params(f"{prefix}.attention")
        yield from self.q_to_channels.named_params(f"{prefix}.q_to_channels")
        yield from self.input_block.named_params(f"{prefix}.input_block")
        yield from self.loc_linear.named_params(f"{prefix}.loc_linear")
        yield from self.loc_restore.named_params(f"{prefix}.loc_restore")
        for i, blk in enumerate(self.down_blocks):
            yield from blk.named_params(f"{prefix}.down{i + 1}")
        for i, blk in enumerate(self.laterals):
            yield from blk.named_params(f"{prefix}.lateral{i + 1}")

    def named_buffers(self, prefix: str):
        yield from self.input_block.named_buffers(f"{prefix}.input_block")
        yield from self.loc_restore.named_buffers(f"{prefix}.loc_restore")
        for i, blk in enumerate(self.down_blocks):
            yield from blk.named_buffers(f"{prefix}.down{i + 1}")
        for i, blk in enumerate(self.laterals):
            yield from blk.named_buffers(f"{prefix}.lateral{i + 1}")

    def inactive_param_names(self, prefix: str) -> set[str]:
        """Parameters that exist but cannot receive gradients under the current
        wiring flags (excluded from optimizer updates)."""
        cfg = self.cfg
        inactive: set[str] = set()
        if not cfg.location_embedding:
            inactive.update(name for name, _ in self.loc_linear.named_params(f"{prefix}.loc_linear"))
            inactive.update(name for name, _ in self.loc_restore.named_params(f"{prefix}.loc_restore"))
        if not cfg.multi_level_fusion or cfg.mlf_same:
            for i, lin in enumerate(self.attention.w2):
                if i > 0:
                    inactive.update(name for name, _ in lin.named_params(f"{prefix}.attention.w2_level{i + 1}"))
        return inactive
