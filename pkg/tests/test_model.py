import numpy as np
import pytest
import torch

from maskdistill import model
from maskdistill.config import load_config
from maskdistill.errors import ShapeError
from maskdistill.model import (ModelState, ema_momentum, ema_update,
                               encode_student, encode_teacher, project_global,
                               project_local, reconstruct)


def small_cfg(**overrides):
    base = dict(image_size=32, patch_size=8, backbone_channels="8 16",
                stem_stride=4, queue_size=64, batch_size=8,
                num_prototypes=16, proto_dim=8, global_dim=8,
                global_hidden=16, local_hidden=16, num_matched_pairs=4)
    base.update(overrides)
    return load_config(overrides=base)


@pytest.fixture
def state():
    torch.manual_seed(0)
    return ModelState(small_cfg())


def test_empty_mask_equals_teacher_path(state):
    state._sync_teacher()
    x = torch.rand(2, 3, 32, 32)
    empty = torch.zeros(2, 4, 4, dtype=torch.bool)
    s = encode_student(state, x, empty)
    t = encode_teacher(state, x)
    assert torch.allclose(s, t, atol=1e-6)


def test_zero_token_injection_is_identity(state):
    x = torch.rand(1, 3, 32, 32)
    mask = torch.zeros(1, 4, 4, dtype=torch.bool)
    mask[0, 1, 2] = True
    assert torch.all(state.mask_token == 0)  # zero init
    with_mask = encode_student(state, x, mask)
    without = encode_student(state, x, None)
    assert torch.allclose(with_mask, without)


def test_token_injection_covers_exact_block(state):
    # patch 8, stem stride 4 -> each masked patch covers a 2x2 stem block
    with torch.no_grad():
        state.mask_token.fill_(100.0)
    x = torch.rand(1, 3, 32, 32)
    mask = torch.zeros(1, 4, 4, dtype=torch.bool)
    mask[0, 0, 0] = True
    stem = state.student_backbone.forward_stem(x)
    grid = model.upsample_mask_to_grid(mask, stem.shape[2], stem.shape[3])
    assert grid.shape == (1, 8, 8)
    assert grid[0, :2, :2].all()
    assert grid.sum() == 4


def test_token_block_replication_factor():
    cfg = load_config(overrides=dict(
        image_size=224, patch_size=32, backbone_channels="8 16",
        stem_stride=4))
    mask = torch.zeros(1, 7, 7, dtype=torch.bool)
    mask[0, 3, 4] = True
    grid = model.upsample_mask_to_grid(mask, 56, 56)
    assert grid.sum() == 64  # 8x8 block of stem cells
    assert grid[0, 24:32, 32:40].all()


def test_teacher_gets_no_gradient(state):
    x = torch.rand(2, 3, 32, 32)
    mask = torch.zeros(2, 4, 4, dtype=torch.bool)
    mask[:, 0, 0] = True
    s_map = encode_student(state, x, mask)
    t_map = encode_teacher(state, x)
    loss = (s_map.mean() - t_map.mean()) ** 2
    loss.backward()
    for p in state._teacher_params():
        assert p.grad is None or torch.all(p.grad == 0)


def test_teacher_deterministic(state):
    x = torch.rand(1, 3, 32, 32)
    a = encode_teacher(state, x)
    b = encode_teacher(state, x)
    assert torch.equal(a, b)


def test_project_global_unit_norm(state):
    fmap = torch.rand(4, 16, 2, 2)
    out = project_global(state.student_global_proj, fmap)
    assert out.shape == (4, 8)
    assert torch.allclose(out.norm(dim=1), torch.ones(4), atol=1e-6)


def test_project_global_gap_of_constant_map(state):
    fmap = torch.full((1, 16, 2, 2), 3.0)
    pooled = fmap.mean(dim=(2, 3))
    assert torch.allclose(pooled, torch.full((1, 16), 3.0))


def test_global_projection_scale_invariance(state):
    raw = torch.rand(1, 8)
    a = torch.nn.functional.normalize(raw, dim=-1)
    b = torch.nn.functional.normalize(2 * raw, dim=-1)
    assert torch.allclose(a, b, atol=1e-6)


def test_project_local_unit_norm_and_permutation(state):
    fmap = torch.rand(2, 16, 2, 2)
    idx = [(0, 0), (1, 1), (0, 1)]
    out = project_local(state.student_local_proj, fmap, idx)
    assert out.shape == (2, 3, 8)
    assert torch.allclose(out.norm(dim=-1), torch.ones(2, 3), atol=1e-6)
    perm = project_local(state.student_local_proj, fmap, [idx[2], idx[0], idx[1]])
    assert torch.allclose(perm[:, 0], out[:, 2])
    assert torch.allclose(perm[:, 1], out[:, 0])


def test_project_local_repeated_index(state):
    fmap = torch.rand(1, 16, 2, 2)
    out = project_local(state.student_local_proj, fmap, [(0, 0), (0, 0)])
    assert torch.allclose(out[:, 0], out[:, 1])


def test_project_local_out_of_range(state):
    with pytest.raises(ShapeError):
        project_local(state.student_local_proj, torch.rand(1, 16, 2, 2), [(2, 0)])


def test_reconstruct_shape(state):
    fmap = torch.rand(2, 16, 4, 4)  # total stride 8 on 32px input
    out = reconstruct(state, fmap)
    assert out.shape == (2, 3, 32, 32)


def test_reconstruct_zero_map_zero_bias(state):
    with torch.no_grad():
        state.mim_head.conv.bias.zero_()
    out = reconstruct(state, torch.zeros(1, 16, 4, 4))
    assert torch.all(out == 0)


def test_reconstruct_depth_to_space_layout(state):
    # identity-like head: channel c of the conv output feeds sub-pixel
    # (c // s, c mod s); craft weights so each output channel carries a
    # distinct constant and verify the block pattern
    s = state.spec.total_stride
    head = state.mim_head
    with torch.no_grad():
        head.conv.weight.zero_()
        head.conv.bias.copy_(torch.arange(head.conv.bias.numel(), dtype=torch.float32))
    out = reconstruct(state, torch.zeros(1, 16, 2, 2))
    # out channel 0 holds conv channels 0..s*s-1 arranged row-major per block
    block = out[0, 0, :s, :s]
    expected = torch.arange(s * s, dtype=torch.float32).reshape(s, s)
    assert torch.equal(block, expected)
    # pattern repeats across blocks
    assert torch.equal(out[0, 0, s:2 * s, :s], expected)


def test_ema_momentum_schedule():
    assert ema_momentum(0, 100, 0.996) == pytest.approx(0.996)
    assert ema_momentum(100, 100, 0.996) == pytest.approx(1.0, abs=1e-12)
    assert ema_momentum(50, 100, 0.996) == pytest.approx(0.998)
    values = [ema_momentum(t, 10_000, 0.996) for t in range(0, 10_001, 7)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_ema_update_arithmetic(state):
    with torch.no_grad():
        for p in state._student_mirrored_params():
            p.fill_(1.0)
        for p in state._teacher_params():
            p.zero_()
    ema_update(state, 0.9)
    for p in state._teacher_params():
        assert torch.allclose(p, torch.full_like(p, 0.1))


def test_ema_endpoints(state):
    before = [p.clone() for p in state._teacher_params()]
    ema_update(state, 1.0)
    for p, b in zip(state._teacher_params(), before):
        assert torch.equal(p, b)
    ema_update(state, 0.0)
    for t, s in zip(state._teacher_params(), state._student_mirrored_params()):
        assert torch.equal(t, s)


def test_ema_excludes_prototypes_and_head(state):
    proto_before = state.prototypes.weight.clone()
    head_before = state.mim_head.conv.weight.clone()
    ema_update(state, 0.5)
    assert torch.equal(state.prototypes.weight, proto_before)
    assert torch.equal(state.mim_head.conv.weight, head_before)


def test_prototype_renormalization(state):
    with torch.no_grad():
        state.prototypes.weight.mul_(3.0)
    state.prototypes.renormalize()
    norms = state.prototypes.weight.norm(dim=1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)
