import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlvqe.model import (
    QE,
    SR,
    NetworkConfig,
    ShapeError,
    build_model,
    count_parameters,
    forward_qe,
    forward_shared,
    forward_sr,
    param_groups,
    pixel_shuffle,
    pixel_unshuffle,
)


def tiny(**kw):
    base = dict(num_blocks=1, trunk_width=8, heads=(SR, QE))
    base.update(kw)
    return build_model(NetworkConfig(**base))


def layer_sum(layers):
    # independent per-layer arithmetic: in*out*k^2 weights + out biases
    return sum(i * o * k * k + o for i, o, k in layers)


def expected_count(B, w, k, r, cin, cout, heads):
    trunk = [(cin, w, k)] + [(w, w, k)] * (2 * B) + [(w, w, k)]
    sr, qe = [], []
    if SR in heads:
        stages = [2] * (r.bit_length() - 1) if r > 1 and r & (r - 1) == 0 else [r]
        sr = [(w, w * s * s, k) for s in stages] + [(w, cout, k)]
    if QE in heads:
        qe = [(w, w, k), (w, cout, k)]
    return layer_sum(trunk), layer_sum(sr), layer_sum(qe)


def test_paper_budget_mtl_b8():
    m = build_model(NetworkConfig(num_blocks=8, trunk_width=256))
    n = count_parameters(m)
    assert 12e6 <= n <= 14e6
    assert n == 13_005_062


def test_paper_budget_single_task_sr_b4():
    m = build_model(NetworkConfig(num_blocks=4, trunk_width=256, heads=(SR,)))
    n = count_parameters(m)
    assert 7.2e6 <= n <= 8.2e6
    assert n == 7_687_427


def test_hand_summed_count():
    # 74 (in conv) + 2*38 (block) + 38 (post) + 152 (expand 2->8) + 57 (out 2->3)
    m = build_model(NetworkConfig(num_blocks=1, trunk_width=2, heads=(SR,)))
    assert count_parameters(m) == 397
    assert count_parameters(m, "head_qe") == 0


@settings(max_examples=20, deadline=None)
@given(B=st.integers(0, 3), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5]),
       r=st.sampled_from([1, 2, 3, 4]), cin=st.integers(1, 5), cout=st.integers(1, 4),
       heads=st.sampled_from([(SR,), (QE,), (SR, QE)]))
def test_count_matches_closed_form(B, w, k, r, cin, cout, heads):
    m = build_model(NetworkConfig(num_blocks=B, trunk_width=w, kernel_size=k, scale_factor=r,
                                  in_channels=cin, out_channels=cout, heads=heads))
    trunk, sr, qe = expected_count(B, w, k, r, cin, cout, heads)
    assert count_parameters(m, "trunk") == trunk
    assert count_parameters(m, "head_sr") == sr
    assert count_parameters(m, "head_qe") == qe
    assert count_parameters(m) == trunk + sr + qe


def test_unknown_group():
    with pytest.raises(KeyError):
        count_parameters(tiny(), "head_xx")


def test_groups_partition_parameters():
    m = tiny()
    groups = param_groups(m)
    names = [n for g in groups.values() for n in g]
    assert sorted(names) == sorted(n for n, _ in m.named_parameters())
    assert len(names) == len(set(names))


@pytest.mark.parametrize("bad", [dict(heads=()), dict(scale_factor=0), dict(trunk_width=0),
                                 dict(num_blocks=-1), dict(alpha=1.5), dict(kernel_size=2)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        NetworkConfig(**bad)


def test_strict_mode_rejects_unit_scale_sr():
    cfg = NetworkConfig(num_blocks=0, trunk_width=4, scale_factor=1)
    build_model(cfg)
    with pytest.raises(ValueError):
        build_model(cfg, strict=True)


def test_effective_alpha():
    assert NetworkConfig(heads=(SR,), alpha=0.3).effective_alpha == 1.0
    assert NetworkConfig(heads=(QE,), alpha=0.3).effective_alpha == 0.0
    assert NetworkConfig(alpha=0.3).effective_alpha == 0.3


def test_b0_builds():
    m = build_model(NetworkConfig(num_blocks=0, trunk_width=8, heads=(SR,)))
    assert len(m.trunk.blocks) == 0
    y = forward_shared(m, torch.rand(4, 10, 12))
    assert y.shape == (8, 10, 12)


def test_shared_shape_and_determinism():
    m = tiny(trunk_width=16)
    x = torch.rand(4, 64, 64)
    y1, y2 = forward_shared(m, x), forward_shared(m, x)
    assert y1.shape == (16, 64, 64)
    assert torch.equal(y1, y2)


def test_shared_channel_mismatch_names_both():
    with pytest.raises(ShapeError, match="expected 4 channels, got 3"):
        forward_shared(tiny(), torch.rand(3, 8, 8))


def test_head_shapes():
    m = tiny(trunk_width=8)
    y = torch.rand(8, 17, 23)
    assert forward_sr(m, y).shape == (3, 34, 46)
    assert forward_qe(m, y).shape == (3, 17, 23)
    with pytest.raises(ShapeError):
        forward_sr(m, torch.rand(7, 4, 4))
    with pytest.raises(ShapeError):
        forward_qe(m, torch.rand(7, 4, 4))


def test_full_width_head_shapes():
    m = build_model(NetworkConfig(num_blocks=0, trunk_width=256))
    y = torch.rand(256, 64, 64)
    with torch.no_grad():
        assert forward_sr(m, y).shape == (3, 128, 128)
        assert forward_qe(m, y).shape == (3, 64, 64)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), r=st.sampled_from([1, 2, 3, 4]))
def test_shape_covariance(h, w, r):
    m = build_model(NetworkConfig(num_blocks=1, trunk_width=4, scale_factor=r))
    with torch.no_grad():
        y = forward_shared(m, torch.rand(4, h, w))
        assert forward_sr(m, y).shape == (3, r * h, r * w)
        assert forward_qe(m, y).shape == (3, h, w)


def test_qe_repeat_call_identity():
    m = tiny()
    y = torch.rand(8, 9, 9)
    assert torch.equal(forward_qe(m, y), forward_qe(m, y))


@pytest.mark.parametrize("head,other", [("head_sr", "head_qe"), ("head_qe", "head_sr")])
def test_head_disjoint_gradients(head, other):
    m = tiny()
    y = forward_shared(m, torch.rand(4, 12, 12))
    out = forward_sr(m, y) if head == "head_sr" else forward_qe(m, y)
    out.sum().backward()
    for name, p in param_groups(m)[other].items():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert any(torch.count_nonzero(p.grad) > 0 for p in param_groups(m)[head].values())


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_zero_residual_identity():
    m = tiny(num_blocks=3)
    x = torch.rand(4, 16, 16)
    x0 = m.trunk.conv_in(x.unsqueeze(0))[0]
    _zero(m.trunk.blocks)
    with torch.no_grad():
        # blocks become identities: trunk = x0 + post(x0)
        expected = x0 + m.trunk.conv_post(x0.unsqueeze(0))[0]
        assert torch.allclose(forward_shared(m, x), expected, atol=1e-6)
        _zero(m.trunk.conv_post)
        assert torch.equal(forward_shared(m, x), x0)


def test_pixel_shuffle_shape_and_hand_example():
    x = torch.zeros(4, 2, 2)
    for k in range(4):
        x[k, 0, 0] = k
    y = pixel_shuffle(x, 2)
    assert y.shape == (1, 4, 4)
    assert y[0, :2, :2].tolist() == [[0, 1], [2, 3]]


def test_pixel_shuffle_rejects_bad_channels():
    with pytest.raises(ShapeError):
        pixel_shuffle(torch.rand(3, 2, 2), 2)


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5), r=st.integers(1, 3))
def test_pixel_shuffle_index_formula_and_bijection(c, h, w, r):
    x = torch.randn(c * r * r, h, w)
    y = pixel_shuffle(x, r)
    for oc in range(c):
        for i in range(r * h):
            for j in range(r * w):
                assert y[oc, i, j] == x[oc * r * r + (i % r) * r + (j % r), i // r, j // r]
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)
    assert torch.equal(pixel_unshuffle(y, r), x)
    assert torch.equal(y, torch.nn.functional.pixel_shuffle(x.unsqueeze(0), r)[0])
