"""Student/teacher encoders, mask-token injection, projectors, reconstruction
head, prototype bank, and EMA machinery."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from maskdistill.augment import PatchMask
from maskdistill.config import RunConfig
from maskdistill.errors import ShapeError


@dataclass
class BackboneSpec:
    name: str = "convnet"
    stem_stride: int = 4
    channels: tuple[int, ...] = (64, 128, 256, 512)

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** (len(self.channels) - 1)


class ConvBackbone(nn.Module):
    """Small hierarchical convolutional encoder: strided stem plus one
    stride-2 stage per extra channel width.  BatchNorm operates per-batch
    with no cross-device statistic shuffling."""

    def __init__(self, spec: BackboneSpec, in_channels: int = 3):
        super().__init__()
        self.spec = spec
        c0 = spec.channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c0, kernel_size=spec.stem_stride + 3,
                      stride=spec.stem_stride, padding=(spec.stem_stride + 2) // 2),
            nn.BatchNorm2d(c0),
            nn.GELU(),
        )
        stages = []
        prev = c0
        for c in spec.channels[1:]:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(c),
                nn.GELU(),
                nn.Conv2d(c, c, kernel_size=3, stride=1, padding=1),
                nn.BatchNorm2d(c),
                nn.GELU(),
            ))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = prev

    def forward_stem(self, x: torch.Tensor) -> torch.Tensor:
        return self.stem(x)

    def forward_stages(self, emb: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            emb = stage(emb)
        return emb

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(self.forward_stem(x))


class GlobalProjector(nn.Module):
    """One hidden layer with BatchNorm; output L2-normalized."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden),
                                 nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=-1)


class LocalProjector(nn.Module):
    """Two hidden layers with BatchNorm; output L2-normalized.

    Accepts (..., C) inputs; leading dimensions are flattened for the
    normalization statistics and restored afterwards.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(-1, x.shape[-1])
        out = F.normalize(self.net(flat), dim=-1)
        return out.reshape(*x.shape[:-1], -1)


class ReconstructionHead(nn.Module):
    """1x1 convolution + depth-to-space back to full resolution."""

    def __init__(self, in_channels: int, stride: int, out_channels: int = 3):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels * stride * stride, kernel_size=1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return F.pixel_shuffle(self.conv(feat), self.stride)


class PrototypeBank(nn.Module):
    """K learnable unit-norm prototype rows shared by the student and the
    (stop-gradient) teacher assignment paths."""

    def __init__(self, num_prototypes: int, dim: int, tau_s: float, tau_t: float):
        super().__init__()
        self.tau_s = tau_s
        self.tau_t = tau_t
        weight = torch.randn(num_prototypes, dim)
        self.weight = nn.Parameter(F.normalize(weight, dim=1))

    @torch.no_grad()
    def renormalize(self) -> None:
        self.weight.copy_(F.normalize(self.weight, dim=1))


class ModelState(nn.Module):
    """All learnable state: student nets, EMA teacher mirrors, prototypes."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        spec = BackboneSpec(stem_stride=cfg.stem_stride, channels=cfg.backbone_channels)
        self.spec = spec

        self.student_backbone = ConvBackbone(spec)
        self.student_global_proj = GlobalProjector(spec.channels[-1], cfg.global_hidden, cfg.global_dim)
        self.student_local_proj = LocalProjector(spec.channels[-1], cfg.local_hidden, cfg.proto_dim)
        self.mask_token = nn.Parameter(torch.zeros(spec.channels[0]))
        self.mim_head = ReconstructionHead(spec.channels[-1], spec.total_stride)
        self.prototypes = PrototypeBank(cfg.num_prototypes, cfg.proto_dim, cfg.tau_s, cfg.tau_t)

        self.teacher_backbone = ConvBackbone(spec)
        self.teacher_global_proj = GlobalProjector(spec.channels[-1], cfg.global_hidden, cfg.global_dim)
        self.teacher_local_proj = LocalProjector(spec.channels[-1], cfg.local_hidden, cfg.proto_dim)
        self._sync_teacher()
        for p in self._teacher_params():
            p.requires_grad_(False)

    def _teacher_params(self):
        for module in (self.teacher_backbone, self.teacher_global_proj, self.teacher_local_proj):
            yield from module.parameters()

    def _student_mirrored_params(self):
        for module in (self.student_backbone, self.student_global_proj, self.student_local_proj):
            yield from module.parameters()

    def _buffer_pairs(self):
        teacher = (self.teacher_backbone, self.teacher_global_proj, self.teacher_local_proj)
        student = (self.student_backbone, self.student_global_proj, self.student_local_proj)
        for tm, sm in zip(teacher, student):
            yield from zip(tm.buffers(), sm.buffers())

    @torch.no_grad()
    def _sync_teacher(self) -> None:
        for t, s in zip(self._teacher_params(), self._student_mirrored_params()):
            t.copy_(s)
        for t, s in self._buffer_pairs():
            t.copy_(s)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def upsample_mask_to_grid(mask: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """Nearest-replicate a (B, Gh, Gw) boolean patch mask onto a finer grid."""
    b, gh, gw = mask.shape
    if grid_h % gh != 0 or grid_w % gw != 0:
        raise ShapeError(f"stem grid {grid_h}x{grid_w} not a multiple of patch grid {gh}x{gw}")
    fh, fw = grid_h // gh, grid_w // gw
    return mask.repeat_interleave(fh, dim=1).repeat_interleave(fw, dim=2)


def encode_student(state: ModelState, masked_image: torch.Tensor,
                   mask: torch.Tensor | None) -> torch.Tensor:
    """Student forward with mask-token injection at stem-grid positions
    covered by masked patches.  ``mask`` is (B, Gh, Gw) booleans or None."""
    emb = state.student_backbone.forward_stem(masked_image)
    if mask is not None and mask.any():
        grid = upsample_mask_to_grid(mask.to(emb.device), emb.shape[2], emb.shape[3])
        emb = emb + state.mask_token[None, :, None, None] * grid[:, None].to(emb.dtype)
    return state.student_backbone.forward_stages(emb)


@torch.no_grad()
def encode_teacher(state: ModelState, image: torch.Tensor) -> torch.Tensor:
    return state.teacher_backbone(image)


def project_global(projector: GlobalProjector, feature_map: torch.Tensor) -> torch.Tensor:
    """GAP then project to the unit sphere."""
    pooled = feature_map.mean(dim=(2, 3))
    return projector(pooled)


def project_local(projector: LocalProjector, feature_map: torch.Tensor,
                  indices: list[tuple[int, int]]) -> torch.Tensor:
    """Select grid cells (row, col) per batch element and project them.

    feature_map is (B, C, H, W); returns (B, N, d) unit vectors.
    """
    _, _, h, w = feature_map.shape
    for r, c in indices:
        if not (0 <= r < h and 0 <= c < w):
            raise ShapeError(f"index ({r}, {c}) outside {h}x{w} grid")
    rows = torch.tensor([r for r, _ in indices], device=feature_map.device)
    cols = torch.tensor([c for _, c in indices], device=feature_map.device)
    vectors = feature_map[:, :, rows, cols].permute(0, 2, 1)  # B x N x C
    return projector(vectors)


def reconstruct(state: ModelState, feature_map: torch.Tensor) -> torch.Tensor:
    return state.mim_head(feature_map)


def ema_momentum(step: int, total_steps: int, m0: float) -> float:
    """Cosine ramp from m0 at step 0 to 1.0 at total_steps."""
    if total_steps <= 0:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


@torch.no_grad()
def ema_update(state: ModelState, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student on all mirrored parameters;
    normalization buffers are copied verbatim."""
    for t, s in zip(state._teacher_params(), state._student_mirrored_params()):
        if t.shape != s.shape:
            raise ShapeError(f"mirrored parameter shape mismatch: {t.shape} vs {s.shape}")
        t.mul_(m).add_(s, alpha=1.0 - m)
    for t, s in state._buffer_pairs():
        t.copy_(s)


def batch_mask_tensor(masks: list[PatchMask]) -> torch.Tensor:
    """Stack PatchMask grids into a (B, Gh, Gw) boolean tensor."""
    return torch.from_numpy(np.stack([m.grid for m in masks]).copy())
