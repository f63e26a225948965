"""Training orchestration: the full three-branch step, schedules,
checkpointing, and metric logging."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from maskdistill import augment, dataio, geometry, losses, model
from maskdistill.config import RunConfig, config_digest
from maskdistill.errors import CheckpointError, TrainingError
from maskdistill.losses import LossReport, MemoryQueue

CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    cfg: RunConfig
    model: model.ModelState
    queue: MemoryQueue
    optimizer: torch.optim.Optimizer
    step: int
    total_steps: int
    warmup_steps: int = 0

    @property
    def loss_weights(self):
        return self.cfg.loss_weights


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_steps: int, floor: float) -> float:
    """Linear warmup from 0, then cosine decay to the floor."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(step - warmup_steps, span)
    return floor + (base_lr - floor) * (1.0 + math.cos(math.pi * t / span)) / 2.0


def init_state(cfg: RunConfig, total_steps: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    net = model.ModelState(cfg)
    queue = MemoryQueue(cfg.queue_size, cfg.global_dim)
    optimizer = torch.optim.AdamW(net.trainable_parameters(), lr=cfg.base_lr,
                                  weight_decay=cfg.weight_decay)
    return TrainState(cfg=cfg, model=net, queue=queue, optimizer=optimizer,
                      step=0, total_steps=total_steps)


def _views_to_tensors(pairs: list[augment.ViewPair]):
    def stack(images):
        arr = np.stack(images).astype(np.float32)
        return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()

    student = stack([p.student_view.image for p in pairs])
    teacher = stack([p.teacher_view.image for p in pairs])
    target = stack([p.student_view.plain if p.student_view.plain is not None
                    else p.student_view.image for p in pairs])
    masks = model.batch_mask_tensor([p.student_view.mask for p in pairs])
    return student, teacher, target, masks


def train_step(state: TrainState, pairs: list[augment.ViewPair]) -> LossReport:
    """One optimization step over a batch of view pairs."""
    cfg = state.cfg
    net = state.model
    device = next(net.parameters()).device
    student_px, teacher_px, target_px, masks = (
        t.to(device) for t in _views_to_tensors(pairs))

    lr = lr_schedule(state.step, state.total_steps, cfg.base_lr,
                     state.warmup_steps, cfg.lr_floor)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    need_student = cfg.branch_mim or cfg.branch_global or cfg.branch_local
    need_teacher = cfg.branch_global or cfg.branch_local

    zero = torch.zeros((), device=device)
    l_spat = l_freq = l_nce = l_local = zero

    student_map = None
    teacher_map = None
    if need_student:
        student_map = model.encode_student(net, student_px, masks)
    if need_teacher:
        teacher_map = model.encode_teacher(net, teacher_px)

    if cfg.branch_mim:
        recon = model.reconstruct(net, student_map)
        pixel_mask = model.upsample_mask_to_grid(masks, cfg.image_size, cfg.image_size)
        l_spat = losses.spatial_loss(target_px, recon, pixel_mask.to(device))
        l_freq = losses.frequency_loss(target_px, recon)

    teacher_keys = None
    if cfg.branch_global:
        q = model.project_global(net.student_global_proj, student_map)
        with torch.no_grad():
            teacher_keys = model.project_global(net.teacher_global_proj, teacher_map)
        # partial-queue mode: only filled rows act as negatives, from step 0
        l_nce = losses.info_nce(q, teacher_keys, state.queue, cfg.tau,
                                include_positive=not cfg.literal_nce_denominator
                                or state.queue.fill == 0)

    if cfg.branch_local:
        gh = gw = cfg.feature_grid
        n = cfg.num_matched_pairs
        s_rows, s_cols, t_rows, t_cols = [], [], [], []
        for pair in pairs:
            pos_s = geometry.feature_positions(pair.student_view.crop, (gh, gw))
            pos_t = geometry.feature_positions(pair.teacher_view.crop, (gh, gw))
            matched = geometry.match_pairs(pos_s, pos_t, n,
                                           bipartite=cfg.bipartite_pairs)
            s_rows.append([i[0] for i in matched.student_indices()])
            s_cols.append([i[1] for i in matched.student_indices()])
            t_rows.append([i[0] for i in matched.teacher_indices()])
            t_cols.append([i[1] for i in matched.teacher_indices()])
        b_idx = torch.arange(len(pairs), device=device)[:, None].expand(-1, n)
        sr = torch.tensor(s_rows, device=device)
        sc = torch.tensor(s_cols, device=device)
        tr = torch.tensor(t_rows, device=device)
        tc = torch.tensor(t_cols, device=device)
        # (B, N, C) gathers, projected in one batched call each
        s_feat = student_map.permute(0, 2, 3, 1)[b_idx, sr, sc]
        s_vec = net.student_local_proj(s_feat.reshape(-1, s_feat.shape[-1]))
        proto_rows = torch.nn.functional.normalize(net.prototypes.weight, dim=1)
        p = losses.prototype_distributions(s_vec, proto_rows, cfg.tau_s)
        with torch.no_grad():
            t_feat = teacher_map.permute(0, 2, 3, 1)[b_idx, tr, tc]
            t_vec = net.teacher_local_proj(t_feat.reshape(-1, t_feat.shape[-1]))
            t_sim = t_vec @ proto_rows.t() / cfg.tau_t
            if cfg.center_teacher:
                t_sim = t_sim - t_sim.mean(dim=0, keepdim=True)
            q_rows = torch.softmax(t_sim, dim=-1)
        l_local = losses.local_loss(p, q_rows,
                                    teacher_as_target=not cfg.literal_local_loss)

    total = losses.total_loss(l_spat, l_freq, l_nce, l_local, cfg.loss_weights)
    report = losses.make_report(l_spat, l_freq, l_nce, l_local, total)
    if not math.isfinite(report.total):
        raise TrainingError("non-finite total loss", report=report)

    if total.requires_grad:
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(net.trainable_parameters(), cfg.grad_clip)
        state.optimizer.step()
        net.prototypes.renormalize()

    m = model.ema_momentum(state.step, state.total_steps, cfg.ema_base)
    model.ema_update(net, m)

    if teacher_keys is not None:
        state.queue.enqueue(teacher_keys)

    state.step += 1
    return report


class MetricsLog:
    """CSV log of per-step loss components."""

    HEADER = ["step", "l_spat", "l_freq", "l_nce", "l_local", "total", "ema_m", "lr"]

    def __init__(self, path: str | os.PathLike, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "a" if append else "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(self.HEADER)

    def write(self, step: int, report: LossReport, ema_m: float, lr: float) -> None:
        self._writer.writerow([step] + [f"{v:.8f}" for v in report.as_row()]
                              + [f"{ema_m:.10f}", f"{lr:.10f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xE90C, epoch])


def _batch_rng(seed: int, epoch: int, pos: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xBA7C, epoch, pos])


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_digest": config_digest(state.cfg),
        "config_fields": {f: getattr(state.cfg, f)
                          for f in state.cfg.__dataclass_fields__},
        "model": state.model.state_dict(),
        "queue": state.queue.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike, cfg: RunConfig | None = None,
                    force: bool = False) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    stored_cfg = RunConfig(**payload["config_fields"]).validate()
    if cfg is not None and config_digest(cfg) != payload["config_digest"]:
        if not force:
            raise CheckpointError(
                "config digest mismatch between checkpoint and supplied config "
                "(pass force=True / --force to override)")
        stored_cfg = cfg
    state = init_state(stored_cfg, payload["total_steps"])
    state.model.load_state_dict(payload["model"])
    state.queue = MemoryQueue.from_state_dict(payload["queue"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return state


def fit(cfg: RunConfig, manifest: dataio.DatasetManifest,
        out_dir: str | os.PathLike,
        resume: Optional[str | os.PathLike] = None,
        max_steps: Optional[int] = None,
        quiet: bool = False) -> Path:
    """Run the pretraining loop; returns the final checkpoint path.

    Per-epoch shuffles and per-batch augmentation draw from generators
    keyed on (seed, epoch, position), so a resumed run replays the exact
    trajectory of an uninterrupted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = len(manifest)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise TrainingError(f"dataset of {n} images smaller than one batch of {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    if resume is not None:
        state = load_checkpoint(resume, cfg)
    else:
        state = init_state(cfg, total_steps)
    state.warmup_steps = warmup_steps

    # decode once; images are desk-scale
    cache = np.stack([dataio.load_record(manifest, i, cfg.image_size).pixels
                      for i in range(n)])
    ids = [rec[0] for rec in manifest.records]

    metrics = MetricsLog(out_dir / "metrics.csv", append=resume is not None)
    ckpt_path = out_dir / "checkpoint.pt"

    end_step = total_steps if max_steps is None else min(total_steps, state.step + max_steps)
    while state.step < end_step:
        epoch, pos = divmod(state.step, steps_per_epoch)
        order = _epoch_rng(cfg.seed, epoch).permutation(n)
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        rng = _batch_rng(cfg.seed, epoch, pos)
        pairs = [augment.make_views(cache[i], cfg, rng, source_id=ids[i]) for i in idx]

        step_before = state.step
        lr = lr_schedule(step_before, total_steps, cfg.base_lr, warmup_steps, cfg.lr_floor)
        m = model.ema_momentum(step_before, total_steps, cfg.ema_base)
        report = train_step(state, pairs)
        if step_before % cfg.log_every == 0 or state.step == total_steps:
            metrics.write(step_before, report, m, lr)
        if not quiet and (step_before % max(1, steps_per_epoch) == 0):
            print(f"step {step_before}/{total_steps} total={report.total:.4f} "
                  f"lr={lr:.2e} m={m:.6f}", flush=True)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, ckpt_path)

    save_checkpoint(state, ckpt_path)
    metrics.close()
    return ckpt_path
