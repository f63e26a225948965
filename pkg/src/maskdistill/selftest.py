"""Fast install-validation checks: geometry oracle, closed-form loss values,
finite-difference gradient checks, queue replay."""

from __future__ import annotations

import math

import numpy as np
import torch

from maskdistill import geometry, losses
from maskdistill.augment import CropRecord


def oracle_positions(crop: CropRecord, grid: tuple[int, int]) -> np.ndarray:
    """Independent reference: map each cell's continuous center through the
    affine crop transform."""
    gh, gw = grid
    out = np.empty((gh, gw, 2))
    for v in range(1, gh + 1):
        for u in range(1, gw + 1):
            uu = gw + 1 - u if crop.hflip else u
            out[v - 1, u - 1, 0] = crop.left + crop.width * (uu - 0.5) / gw
            out[v - 1, u - 1, 1] = crop.top + crop.height * (v - 0.5) / gh
    return out


def random_crop(rng: np.random.Generator, orig: int = 256) -> CropRecord:
    w = rng.uniform(8, orig)
    h = rng.uniform(8, orig)
    return CropRecord(left=rng.uniform(0, orig - w), top=rng.uniform(0, orig - h),
                      width=w, height=h, hflip=bool(rng.random() < 0.5), out_size=224)


def check_geometry_oracle(n_crops: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_crops):
        crop = random_crop(rng)
        grid = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
        got = geometry.feature_positions(crop, grid).positions
        worst = max(worst, float(np.abs(got - oracle_positions(crop, grid)).max()))
    return worst <= 1e-9, f"max position error {worst:.2e}"


def check_match_oracle(n_pairs: int = 20, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        ca, cb = random_crop(rng), random_crop(rng)
        pa = geometry.feature_positions(ca, (7, 7))
        pb = geometry.feature_positions(cb, (7, 7))
        got = geometry.match_pairs(pa, pb, 20)
        # exhaustive oracle: sort all 49x49 distances with the same tie rule
        fa = pa.positions.reshape(-1, 2)
        fb = pb.positions.reshape(-1, 2)
        entries = sorted(
            (float(np.linalg.norm(fa[i] - fb[j])), i, j)
            for i in range(49) for j in range(49))
        for (si, ti, d), (od, oi, oj) in zip(
                ((p[0], p[1], p[2]) for p in got.pairs), entries):
            if (si[0] * 7 + si[1], ti[0] * 7 + ti[1]) != (oi, oj) or abs(d - od) > 1e-12:
                return False, "pair mismatch against exhaustive sort"
    return True, f"{n_pairs} random crop pairs match the exhaustive oracle"


def check_closed_forms() -> tuple[bool, str]:
    # orthogonal-queue contrastive value
    q = torch.zeros(1, 6)
    q[0, 0] = 1.0
    kp = q.clone()
    queue = losses.MemoryQueue(4, 6)
    keys = torch.zeros(4, 6)
    for i in range(4):
        keys[i, i + 2] = 1.0
    queue.enqueue(keys)
    val = float(losses.info_nce(q, kp, queue, tau=0.2))
    expect = math.log(1 + 4 * math.exp(-1 / 0.2))
    if abs(val - expect) > 1e-6:
        return False, f"info_nce {val} != {expect}"

    # uniform assignment cross-entropy
    rows = torch.full((3, 4), 0.25)
    val = float(losses.local_loss(rows, rows))
    if abs(val - math.log(4)) > 1e-6:
        return False, f"local_loss {val} != ln 4"

    # perfect reconstruction
    x = torch.rand(1, 3, 8, 8)
    mask = torch.ones(1, 8, 8, dtype=torch.bool)
    if float(losses.spatial_loss(x, x.clone(), mask)) != 0.0:
        return False, "spatial_loss nonzero at perfect reconstruction"
    if float(losses.frequency_loss(x, x.clone())) != 0.0:
        return False, "frequency_loss nonzero at perfect reconstruction"
    return True, "info_nce, local_loss, spatial, frequency closed forms agree"


def finite_difference_check(fn, inputs: list[torch.Tensor], eps: float = 1e-4,
                            rtol: float = 1e-3) -> tuple[bool, float]:
    """Central finite differences vs autograd on small double-precision probes."""
    leaves = [t.detach().double().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    out.backward()
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad.detach().clone()
        flat = leaf.detach().reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(fn(*[l.detach() for l in leaves]))
            flat[i] = orig - eps
            lo = float(fn(*[l.detach() for l in leaves]))
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(grad.reshape(-1)[i])
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
    return worst <= rtol, worst


def check_gradients(seed: int = 2) -> tuple[bool, str]:
    torch.manual_seed(seed)
    results = []

    mask = torch.tensor([[[True, False], [True, True]]])
    x = torch.rand(1, 2, 2, 2, dtype=torch.float64)

    def spat(pred):
        return losses.spatial_loss(x, pred, mask)

    results.append(finite_difference_check(spat, [torch.rand(1, 2, 2, 2)]))

    # adaptive focal weights are gradient-free, so freeze them at the base
    # point for the finite-difference oracle
    pred0 = torch.rand(1, 1, 2, 2)
    w0 = losses.focal_weights(x[:, :1], pred0.double())

    def freq(pred):
        return losses.frequency_loss(x[:, :1], pred, weights=w0)

    results.append(finite_difference_check(freq, [pred0]))

    queue = losses.MemoryQueue(3, 4, dtype=torch.float64)
    queue.enqueue(torch.nn.functional.normalize(torch.randn(3, 4, dtype=torch.float64), dim=1))
    kp = torch.nn.functional.normalize(torch.randn(1, 4, dtype=torch.float64), dim=1)

    def nce(raw):
        qv = torch.nn.functional.normalize(raw, dim=1)
        return losses.info_nce(qv, kp, queue, tau=0.2)

    results.append(finite_difference_check(nce, [torch.randn(1, 4)]))

    target = torch.softmax(torch.randn(2, 4, dtype=torch.float64), dim=1)

    def local(logits):
        return losses.local_loss(torch.softmax(logits, dim=1), target)

    results.append(finite_difference_check(local, [torch.randn(2, 4)]))

    worst = max(r[1] for r in results)
    return all(r[0] for r in results), f"max relative gradient error {worst:.2e}"


def check_queue_replay(n_sequences: int = 10, seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(n_sequences):
        cap = int(rng.integers(2, 16))
        dim = int(rng.integers(2, 8))
        queue = losses.MemoryQueue(cap, dim)
        replay: list[np.ndarray] = []
        for _ in range(int(rng.integers(1, 12))):
            b = int(rng.integers(1, cap + 1))
            keys = rng.normal(size=(b, dim))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            keys = keys.astype(np.float32)
            queue.enqueue(torch.from_numpy(keys))
            replay.extend(keys)
        kept = replay[-min(len(replay), cap):]
        expect = {tuple(k) for k in kept}
        got = {tuple(r.numpy()) for r in queue.filled()}
        if expect != got:
            return False, "queue contents diverge from list replay"
    return True, f"{n_sequences} random enqueue sequences replay correctly"


CHECKS = [
    ("geometry-oracle", check_geometry_oracle),
    ("match-oracle", check_match_oracle),
    ("closed-forms", check_closed_forms),
    ("gradients", check_gradients),
    ("queue-replay", check_queue_replay),
]


def run_selftest(verbose: bool = True) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        ok, detail = fn()
        ok_all &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok_all
