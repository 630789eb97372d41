"""Toy mask-classification segmentation network.

A small convolutional encoder downsamples the image to stride 4, a two-layer
pixel decoder emits per-pixel features ``F`` (C x H/4 x W/4), and N learned
query vectors (conditioned on globally pooled encoder context so class
predictions depend on the image) feed a linear class head producing a
distribution over K classes plus a no-object label, and a two-layer head
producing mask embeddings ``f``. Soft masks arise from the dot product
``f . F``, upsampled bilinearly to full resolution before the sigmoid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from .config import ArchConfig


class NonFiniteError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class PredictionSet:
    """One forward pass: class distributions, embeddings, features, masks."""

    class_probs: torch.Tensor      # N x (K+1), rows on the simplex
    mask_embeddings: torch.Tensor  # N x C
    pixel_features: torch.Tensor   # C x H/4 x W/4
    soft_masks: torch.Tensor       # N x H x W in [0, 1]

    def __post_init__(self) -> None:
        n, kp1 = self.class_probs.shape
        c = self.mask_embeddings.shape[1]
        if self.mask_embeddings.shape[0] != n:
            raise ValueError("mask_embeddings row count must match class_probs")
        if self.pixel_features.shape[0] != c:
            raise ValueError("pixel_features channel count must match embeddings")
        h, w = self.soft_masks.shape[1], self.soft_masks.shape[2]
        if self.soft_masks.shape[0] != n:
            raise ValueError("soft_masks count must match query count")
        if (self.pixel_features.shape[1] != h // 4
                or self.pixel_features.shape[2] != w // 4):
            raise ValueError("pixel_features must be at stride 4")
        for name in ("class_probs", "mask_embeddings", "pixel_features",
                     "soft_masks"):
            if not torch.isfinite(getattr(self, name)).all():
                raise NonFiniteError(f"non-finite values in {name}")
        del kp1

    @property
    def num_queries(self) -> int:
        return self.class_probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[1] - 1

    @property
    def no_object_index(self) -> int:
        # probability columns are class 1..K at 0..K-1; no-object label last
        return self.class_probs.shape[1] - 1

    def detached(self) -> "PredictionSet":
        return PredictionSet(self.class_probs.detach(),
                             self.mask_embeddings.detach(),
                             self.pixel_features.detach(),
                             self.soft_masks.detach())


class RegionModel(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w, g, c = cfg.width, cfg.norm_groups, cfg.embed_dim
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 3, stride=2, padding=1),
            nn.GroupNorm(g, w), nn.ReLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.GroupNorm(g, w), nn.ReLU(),
        )
        self.pixel_decoder = nn.Sequential(
            nn.Conv2d(w, w, 3, padding=1),
            nn.GroupNorm(g, w), nn.ReLU(),
            nn.Conv2d(w, c, 1),
        )
        self.queries = nn.Parameter(torch.zeros(cfg.num_queries, w))
        self.context = nn.Linear(w, w)
        self.probe_head = nn.Linear(w, c)
        self.region_proj = nn.Linear(c, w)
        self.class_head = nn.Linear(w, cfg.num_classes + 1)
        self.mask_head = nn.Sequential(nn.Linear(w, w), nn.ReLU(),
                                       nn.Linear(w, c))

    def forward(self, image: torch.Tensor) -> PredictionSet:
        if image.dim() != 3:
            raise ValueError("expected a single channels-first image")
        h, w = image.shape[1], image.shape[2]
        if h % 4 or w % 4:
            raise ValueError("image height and width must be divisible by 4")
        if not torch.isfinite(image).all():
            raise NonFiniteError("non-finite values in input image")

        feats = self.encoder(image.unsqueeze(0))
        pixel_features = self.pixel_decoder(feats).squeeze(0)
        flat = pixel_features.reshape(pixel_features.shape[0], -1)

        # each query reads the image twice: a global context vector, then
        # features pooled under its own dot-product probe mask
        context = self.context(feats.mean(dim=(2, 3)).squeeze(0))
        q0 = self.queries + context
        probe = torch.sigmoid(self.probe_head(q0) @ flat)
        pooled = (probe @ flat.T) / (probe.sum(dim=1, keepdim=True) + 1e-6)
        query_feats = q0 + self.region_proj(pooled)

        class_probs = torch.softmax(self.class_head(query_feats), dim=1)
        mask_embeddings = self.mask_head(query_feats)

        mask_logits = torch.einsum("nc,chw->nhw", mask_embeddings, pixel_features)
        mask_logits = tf.interpolate(mask_logits.unsqueeze(0), size=(h, w),
                                     mode="bilinear", align_corners=False)
        soft_masks = torch.sigmoid(mask_logits.squeeze(0))
        return PredictionSet(class_probs, mask_embeddings, pixel_features,
                             soft_masks)


def init_params(seed: int, arch_config: ArchConfig | None = None) -> RegionModel:
    """Build a model with deterministic, seed-derived initialization."""
    cfg = arch_config or ArchConfig()
    model = RegionModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                std = (2.0 / fan_in) ** 0.5
                p.copy_(torch.randn(p.shape, generator=gen) * std)
            elif name.endswith("weight"):  # norm scales
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def forward(image: np.ndarray | torch.Tensor, model: RegionModel) -> PredictionSet:
    """Run the network on one channels-first image."""
    if isinstance(image, np.ndarray):
        p = next(model.parameters())
        image = torch.as_tensor(image, dtype=p.dtype, device=p.device)
    return model(image)


def clone_model(model: RegionModel) -> RegionModel:
    twin = RegionModel(model.cfg)
    twin.to(next(model.parameters()).dtype)
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return twin


def architecture_fingerprint(model: RegionModel) -> str:
    spec = {"arch": "regionseg-v1",
            "width": model.cfg.width, "embed_dim": model.cfg.embed_dim,
            "num_queries": model.cfg.num_queries,
            "num_classes": model.cfg.num_classes,
            "in_channels": model.cfg.in_channels,
            "params": [(n, tuple(p.shape)) for n, p in model.named_parameters()]}
    digest = hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()
    return f"regionseg-v1-{digest[:16]}"


def save_checkpoint(model: RegionModel, path: str | Path) -> None:
    """Named-array archive with an architecture fingerprint header."""
    arrays = {f"param/{n}": p.detach().cpu().numpy()
              for n, p in model.named_parameters()}
    arrays["fingerprint"] = np.array(architecture_fingerprint(model))
    arrays["arch_json"] = np.array(json.dumps(
        {k: getattr(model.cfg, k) for k in
         ("in_channels", "width", "embed_dim", "num_queries", "num_classes",
          "norm_groups")}))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path,
                    arch_config: ArchConfig | None = None) -> RegionModel:
    """Load a checkpoint; refuses archives whose fingerprint does not match
    the expected architecture (the archive's own when none is given)."""
    with np.load(path) as archive:
        arch = arch_config or ArchConfig(**json.loads(str(archive["arch_json"])))
        model = RegionModel(arch)
        expected = architecture_fingerprint(model)
        found = str(archive["fingerprint"])
        if found != expected:
            raise CheckpointError(
                f"architecture fingerprint mismatch: checkpoint has {found}, "
                f"this build expects {expected}")
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(torch.from_numpy(archive[f"param/{n}"]))
    return model
