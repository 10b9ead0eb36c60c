"""Full model: interaction module G feeding the grounding heads, with named
parameter and buffer registries grouped by owner (g / match / loc / quality)
for stage-wise freezing and checkpointing."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .grounding import GroundingHeads, HeadOutputs, build_geometry
from .interaction import InteractionModule

GROUPS = ("g", "match", "loc", "quality")


class DrnModel:
    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.vocab_size < 1:
            raise ValueError("ModelConfig.vocab_size must be set from the dataset")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.interaction = InteractionModule(cfg, rng)
        self.heads = GroundingHeads(cfg, rng)
        self.geometry = build_geometry(cfg.segments, cfg.levels)

        self.params: dict[str, Tensor] = {}
        for name, p in self.interaction.named_params("g"):
            self.params[name] = p
        for name, p in self.heads.named_params():
            self.params[name] = p
        self.buffers: dict[str, tuple[object, str]] = {}
        for name, owner, attr in self.interaction.named_buffers("g"):
            self.buffers[name] = (owner, attr)
        for name, owner, attr in self.heads.named_buffers():
            self.buffers[name] = (owner, attr)
        self._inactive = self.interaction.inactive_param_names("g")

    def forward(self, features: np.ndarray, token_ids: np.ndarray, token_mask: np.ndarray,
                train: bool = False, with_quality: bool = True) -> HeadOutputs:
        """features (B, K, feature_dim) float32; token_ids/mask (B, N)."""
        pyramid = self.interaction(ad.constant(features), token_ids, token_mask, train)
        return self.heads(pyramid, self.geometry.strides, train, with_quality)

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def group_names(self, group: str) -> list[str]:
        return [n for n in self.params if self.group_of(n) == group]

    def active_param_names(self) -> set[str]:
        return {n for n in self.params if n not in self._inactive}

    def trainable_names(self, groups: set[str]) -> set[str]:
        """Active parameters belonging to the given unfrozen groups."""
        return {n for n in self.active_param_names() if self.group_of(n) in groups}

    def set_requires_grad(self, groups: set[str]) -> None:
        for name, p in self.params.items():
            p.requires_grad = self.group_of(name) in groups

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every named state tensor: trainable parameters plus batchnorm
        running statistics (suffixed names distinct from parameters)."""
        out = {name: p.data for name, p in self.params.items()}
        for name, (owner, attr) in self.buffers.items():
            out[name] = getattr(owner, attr)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Restore parameters and buffers by name; shape mismatches name the
        offending tensor."""
        current = self.state_arrays()
        missing = sorted(set(current) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:4]}...")
        for name, p in self.params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, "
                    f"model {tuple(p.data.shape)}"
                )
            p.data = arr.astype(np.float32)
        for name, (owner, attr) in self.buffers.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(getattr(owner, attr).shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, "
                    f"model {tuple(getattr(owner, attr).shape)}"
                )
            setattr(owner, attr, arr.astype(np.float32))


def build_model(cfg: ModelConfig, vocab_size: int, seed: int) -> DrnModel:
    import dataclasses

    if cfg.vocab_size == 0:
        cfg = dataclasses.replace(cfg, vocab_size=vocab_size)
    elif cfg.vocab_size != vocab_size:
        raise ValueError(f"config vocab_size {cfg.vocab_size} != dataset vocabulary {vocab_size}")
    return DrnModel(cfg, seed)
