import pytest
import torch

from causaltraj.attention import (AggregateContext, MultiViewAttention, TargetedAttention, aggregate_context,
                                  bev_attention, spatial_attention, temporal_attention)
from causaltraj.config import AttentionConfig


@pytest.fixture
def att():
    torch.manual_seed(0)
    return TargetedAttention(8).double()


def test_single_key_gets_all_weight(att):
    _, w = spatial_attention(torch.randn(8, dtype=torch.float64), torch.randn(1, 8, dtype=torch.float64), att)
    assert w.flatten().tolist() == [1.0]


def test_identical_keys_split_weight(att):
    k = torch.randn(1, 8, dtype=torch.float64).expand(2, 8)
    _, w = spatial_attention(torch.randn(8, dtype=torch.float64), k, att)
    assert torch.allclose(w, torch.full_like(w, 0.5), atol=1e-15)


def test_weights_normalise(att):
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        _, w = bev_attention(torch.randn(8, generator=g, dtype=torch.float64),
                             torch.randn(5, 8, generator=g, dtype=torch.float64), att)
        assert abs(w.sum().item() - 1) < 1e-6


def test_output_is_convex_combination_of_values():
    torch.manual_seed(0)
    att = TargetedAttention(8, residual=False).double()
    xh, keys = torch.randn(8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    out, w = spatial_attention(xh, keys, att)
    ref = att.o((w.reshape(-1, 1) * att.v(keys)).sum(0))
    assert torch.allclose(out, ref, atol=1e-12)


def test_masked_rows_get_zero_weight_and_single_key_equivalence(att):
    xh = torch.randn(8, dtype=torch.float64)
    keys = torch.randn(4, 8, dtype=torch.float64)
    mask = torch.tensor([False, True, False, False])
    out, w, empty = temporal_attention(xh, keys, mask, att)
    assert w[..., 0].item() == 0 and w[..., 2].item() == 0 and w[..., 3].item() == 0 and not empty
    single, _, _ = temporal_attention(xh, keys[1:2], torch.tensor([True]), att)
    assert torch.allclose(out, single, atol=1e-12)


def test_no_neighbours_gives_zero_context_and_flag(att):
    xh = torch.randn(8, dtype=torch.float64)
    out, _, empty = temporal_attention(xh, torch.zeros(0, 8, dtype=torch.float64), torch.zeros(0, dtype=torch.bool), att)
    assert empty and torch.equal(out, torch.zeros(8, dtype=torch.float64))
    out, _, empty = temporal_attention(xh, torch.randn(3, 8, dtype=torch.float64), torch.zeros(3, dtype=torch.bool), att)
    assert empty and torch.equal(out, torch.zeros(8, dtype=torch.float64))


def test_permuting_unmasked_rows(att):
    xh = torch.randn(8, dtype=torch.float64)
    keys = torch.randn(5, 8, dtype=torch.float64)
    mask = torch.tensor([True, True, False, True, True])
    perm = torch.tensor([3, 0, 2, 4, 1])
    a, _, _ = temporal_attention(xh, keys, mask, att)
    b, _, _ = temporal_attention(xh, keys[perm], mask[perm], att)
    assert torch.allclose(a, b, atol=1e-6)


def test_spatial_attention_needs_a_key(att):
    with pytest.raises(ValueError):
        spatial_attention(torch.randn(8, dtype=torch.float64), torch.zeros(0, 8, dtype=torch.float64), att)


def test_aggregate_shape_determinism_and_live_branches():
    torch.manual_seed(0)
    agg = AggregateContext(6).double()
    xs = [torch.randn(6, dtype=torch.float64, requires_grad=True) for _ in range(4)]
    tok = aggregate_context(*xs, agg, index=2)
    assert tok.values.shape == (6,) and tok.backdoor_index == 2
    assert torch.equal(tok.values, aggregate_context(*xs, agg).values)
    grads = torch.autograd.grad(tok.values.sum(), xs)
    for g in grads:
        assert g.abs().sum() > 0
    with pytest.raises(ValueError):
        aggregate_context(torch.full((6,), float("nan"), dtype=torch.float64), *xs[1:], agg)


def test_multi_view_context_depends_on_each_backdoor_sample():
    torch.manual_seed(0)
    mv = MultiViewAttention(8, AttentionConfig()).double()
    b, n, n_m = 2, 3, 4
    xh = torch.randn(b, 8, dtype=torch.float64)
    s = torch.randn(b, n, n_m, 8, dtype=torch.float64)
    args = (torch.ones(b, n_m, dtype=torch.bool), torch.randn(b, 5, 8, dtype=torch.float64),
            torch.randn(b, 2, 8, dtype=torch.float64), torch.ones(b, 2, dtype=torch.bool))
    out = mv(xh, s, *args)
    assert out.shape == (b, n, 8)
    s2 = s.clone()
    s2[:, 1] += 0.1
    out2 = mv(xh, s2, *args)
    assert (out2[:, 1] - out[:, 1]).abs().max() > 0
    assert torch.equal(out2[:, 0], out[:, 0])


def test_context_gradient_to_inputs_matches_finite_differences():
    torch.manual_seed(0)
    mv = MultiViewAttention(6).double()
    xh = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
    rest = (torch.randn(1, 2, 3, 6, dtype=torch.float64), torch.ones(1, 3, dtype=torch.bool),
            torch.randn(1, 4, 6, dtype=torch.float64), torch.randn(1, 2, 6, dtype=torch.float64),
            torch.ones(1, 2, dtype=torch.bool))
    f = lambda x: mv(x, *rest).pow(2).sum()  # noqa: E731
    (g,) = torch.autograd.grad(f(xh), xh)
    h = 1e-5
    num = torch.zeros(6, dtype=torch.float64)
    for i in range(6):
        e = torch.zeros(1, 6, dtype=torch.float64)
        e[0, i] = h
        num[i] = (f(xh.detach() + e) - f(xh.detach() - e)) / (2 * h)
    assert (g.flatten() - num).norm() / num.norm() < 1e-4
