import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from gazenlq.gaze import GazeEstimatorConfig, GazeModel
from gazenlq.grounding import (
    FeaturePyramid,
    GroundingConfig,
    GroundingModel,
    PredictionHeads,
    PyramidEncoder,
    assign_targets,
    decode_offsets,
    downsample_mask,
    gaze_stream,
    localization_loss,
    offset_iou,
)
from gazenlq.layers import CrossAttention, band_mask

D = 16
GAZE_CFG = GazeEstimatorConfig(d_in=12, d_model=D, n_glu_layers=1, n_heads=2, conv_channels=2)


def ground_cfg(**kw):
    base = dict(d_model=D, n_heads=2, n_pyramid_levels=3, d_video=10, d_text=6, dropout=0.0)
    return GroundingConfig(**{**base, **kw})


def make_batch(b=2, t=7, lengths=(7, 5), seed=0):
    g = torch.Generator().manual_seed(seed)
    mask = torch.zeros(b, t, dtype=torch.bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True
    return {
        "video": torch.randn(b, t, 10, generator=g),
        "gaze_features": torch.randn(b, t, 12, generator=g),
        "video_mask": mask,
        "text": torch.randn(b, 4, 6, generator=g),
        "text_mask": torch.ones(b, 4, dtype=torch.bool),
    }


# cross-attention -------------------------------------------------------------

def test_cross_attention_output_shape_and_width_check():
    ca = CrossAttention(D, 2)
    out = ca(torch.randn(2, 5, D), torch.randn(2, 3, D))
    assert out.shape == (2, 5, D)
    with pytest.raises(ValueError):
        ca(torch.randn(1, 5, D), torch.randn(1, 3, D + 2))


def test_cross_attention_fully_masked_context_is_identity():
    ca = CrossAttention(D, 2)
    v = torch.randn(1, 4, D)
    out = ca(v, torch.randn(1, 3, D), torch.zeros(1, 3, dtype=torch.bool))
    assert torch.equal(out, v)


def test_masked_context_rows_get_zero_weight():
    ca = CrossAttention(D, 2)
    mask = torch.tensor([[True, False, True]])
    _, w = ca.attn(torch.randn(1, 2, D), torch.randn(1, 3, D), mask, return_weights=True)
    assert torch.all(w[..., 1] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(1, 2, 2))


def test_band_mask():
    m = band_mask(4, 4, 1)
    assert m.tolist() == [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
    assert band_mask(3, 3, None) is None


# fusion ----------------------------------------------------------------------

def test_fuse_counts_residual_once():
    torch.manual_seed(0)
    model = GroundingModel(ground_cfg(gaze_mode="off")).eval()
    # make the self-attention block an identity so the sum is visible
    for p in model.fuse_block.parameters():
        torch.nn.init.zeros_(p)
    v = torch.randn(1, 4, D)
    vm = torch.ones(1, 4, dtype=torch.bool)
    t = torch.randn(1, 3, D)
    tm = torch.ones(1, 3, dtype=torch.bool)
    fused = model.fuse_streams(v, vm, None, t, tm)
    expected = v + model.text_attn.delta(v, t, tm)
    assert torch.allclose(fused, expected, atol=1e-6)


def test_gaze_off_ignores_gaze_input():
    torch.manual_seed(1)
    model = GroundingModel(ground_cfg(gaze_mode="off")).eval()
    a = make_batch()
    b = dict(a, gaze_features=torch.randn_like(a["gaze_features"]) * 50)
    pa, pb = model(a), model(b)
    for x, y in zip(pa.cls_logits, pb.cls_logits):
        assert torch.equal(x, y)


def test_gaze_modes_need_estimator():
    with pytest.raises(ValueError):
        GroundingModel(ground_cfg(gaze_mode="positive"))
    with pytest.raises(ValueError):
        gaze_stream(None, None, torch.ones(1, 2, dtype=torch.bool), "positive")


def test_negative_mode_encodes_complement():
    torch.manual_seed(2)
    gaze = GazeModel(GAZE_CFG).eval()
    mask = torch.ones(1, 3, dtype=torch.bool)
    maps = torch.rand(1, 3, 64, 64)
    maps = maps / maps.sum(dim=(-2, -1), keepdim=True)
    comp = (1 - maps) / (1 - maps).sum(dim=(-2, -1), keepdim=True)
    neg = gaze_stream(gaze, None, mask, "negative", heatmaps=maps)
    assert torch.allclose(neg, gaze.branch(comp), atol=1e-5)
    pos = gaze_stream(gaze, None, mask, "positive", heatmaps=maps)
    assert not torch.allclose(pos, neg)


def test_positive_mode_forward_runs_with_estimator():
    torch.manual_seed(3)
    model = GroundingModel(ground_cfg(), GazeModel(GAZE_CFG)).eval()
    pyr = model(make_batch())
    assert pyr.lengths == [7, 4, 2]
    assert all(torch.isinf(c[1, 5:7]).all() for c in pyr.cls_logits[:1])


# pyramid ---------------------------------------------------------------------

def test_pyramid_example_lengths():
    enc = PyramidEncoder(D, 2, 3)
    pyr = enc(torch.randn(1, 5, D), torch.ones(1, 5, dtype=torch.bool))
    assert pyr.lengths == [5, 3, 2] and pyr.strides == [1, 2, 4]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 512))
def test_pyramid_lengths_ceil_halving(t):
    mask = torch.ones(1, t, dtype=torch.bool)
    lengths = [t]
    for _ in range(3):
        mask = downsample_mask(mask)
        lengths.append(mask.shape[1])
    for a, b in zip(lengths, lengths[1:]):
        assert b == math.ceil(a / 2)


def test_downsample_mask_or_pools():
    m = torch.tensor([[True, True, True, False, False]])
    assert downsample_mask(m).tolist() == [[True, True, False]]


def test_single_level_pyramid():
    enc = PyramidEncoder(D, 2, 1)
    assert enc(torch.randn(1, 4, D), torch.ones(1, 4, dtype=torch.bool)).lengths == [4]


# heads -----------------------------------------------------------------------

def test_zero_weight_heads():
    heads = PredictionHeads(D, cls_prior=0)
    for p in heads.parameters():
        torch.nn.init.zeros_(p)
    mask = torch.ones(1, 3, dtype=torch.bool)
    pyr = heads(FeaturePyramid([1], [torch.randn(1, 3, D)], [mask]))
    assert torch.all(pyr.cls_logits[0] == 0)
    assert torch.allclose(pyr.reg_offsets[0], torch.full((1, 3, 2), math.log(2)))


def test_heads_prior_and_masking():
    heads = PredictionHeads(D, cls_prior=0.01)
    mask = torch.tensor([[True, False]])
    pyr = heads(FeaturePyramid([1], [torch.zeros(1, 2, D)], [mask]))
    assert torch.sigmoid(pyr.cls_logits[0][0, 0]).item() == pytest.approx(0.01, abs=1e-3)
    assert pyr.cls_logits[0][0, 1].item() == float("-inf")
    assert torch.all(pyr.reg_offsets[0] >= 0)


# target assignment -----------------------------------------------------------

def test_assign_targets_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 40))
        spw = float(rng.uniform(0.2, 2.0))
        s = float(rng.uniform(0, t * spw * 0.9))
        e = float(rng.uniform(s + 1e-3, t * spw))
        lengths = [t]
        for _ in range(3):
            lengths.append(-(-lengths[-1] // 2))
        labels, targets = assign_targets((s, e), spw, lengths)
        assert sum(int(l.sum()) for l in labels) >= 1
        for lvl, (lab, tgt) in enumerate(zip(labels, targets)):
            for i in np.flatnonzero(lab):
                a, b = decode_offsets(lvl, i, tgt[i], spw)
                assert abs(a - s) < 1e-6 and abs(b - e) < 1e-6


def test_assign_targets_level_ranges():
    # a 3-window interval belongs to level 1 ([2, 4) windows)
    labels, _ = assign_targets((2.0, 5.0), 1.0, [8, 4, 2])
    assert not labels[0].any() and labels[1].any() and not labels[2].any()
    # level-1 centers sit at 1, 3, 5, 7 s; the closed interval holds 3 and 5
    assert np.flatnonzero(labels[1]).tolist() == [1, 2]


def test_assign_targets_fallback_nearest_midpoint():
    # interval shorter than one window lands on level 0 but may hold no center
    labels, _ = assign_targets((0.1, 0.3), 1.0, [4, 2])
    assert labels[0].tolist() == [True, False, False, False]


def test_assign_targets_rejects_bad_interval():
    with pytest.raises(ValueError):
        assign_targets((3.0, 3.0), 1.0, [4])


# loss ------------------------------------------------------------------------

def _pyramid(logits, offsets, masks=None):
    masks = masks or [torch.ones(l.shape, dtype=torch.bool) for l in logits]
    return FeaturePyramid([2**i for i in range(len(logits))], [None] * len(logits), masks, logits, offsets)


def test_reg_loss_example():
    pyr = _pyramid([torch.tensor([[20.0]])], [torch.tensor([[[1.0, 1.0]]])])
    labels = [torch.tensor([[True]])]
    targets = [torch.tensor([[[2.0, 2.0]]])]
    _, reg, _ = localization_loss(pyr, labels, targets)
    assert reg.item() == pytest.approx(0.5, abs=1e-9)


def test_offset_iou_same_center():
    assert offset_iou(torch.tensor([1.0, 1.0]), torch.tensor([2.0, 2.0])).item() == pytest.approx(0.5)
    assert offset_iou(torch.tensor([1.0, 3.0]), torch.tensor([3.0, 1.0])).item() == pytest.approx(2 / 6)


def test_focal_loss_matches_explicit_formula():
    logits = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    labels = [torch.tensor([[True, False, False]])]
    pyr = _pyramid([logits], [torch.ones(1, 3, 2, dtype=torch.float64)])
    cls, _, _ = localization_loss(pyr, labels, [torch.ones(1, 3, 2)], gamma=2, alpha=0.5)
    total = 0.0
    for x, y in zip([0.3, -1.2, 2.0], [1, 0, 0]):
        p = 1 / (1 + math.exp(-x))
        pt = p if y else 1 - p
        total += 0.5 * -((1 - pt) ** 2) * math.log(pt)
    assert cls.item() == pytest.approx(total / 1, rel=1e-9)


def test_no_positive_gives_cls_only():
    pyr = _pyramid([torch.tensor([[0.5, -0.5]])], [torch.ones(1, 2, 2)])
    cls, reg, total = localization_loss(pyr, [torch.zeros(1, 2, dtype=torch.bool)], [torch.ones(1, 2, 2)])
    assert reg.item() == 0 and total.item() == cls.item() >= 0


def test_masked_locations_excluded():
    masks = [torch.tensor([[True, False]])]
    logits = [torch.tensor([[0.0, float("-inf")]])]
    pyr = _pyramid(logits, [torch.ones(1, 2, 2)], masks)
    cls, _, total = localization_loss(pyr, [torch.tensor([[True, False]])], [torch.ones(1, 2, 2)])
    assert math.isfinite(total.item())


def test_localization_gradient_matches_finite_differences():
    torch.manual_seed(5)
    logits = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    raw = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
    labels = [torch.tensor([[True, False, False, True], [False, True, False, False]])]
    targets = [torch.rand(2, 4, 2, dtype=torch.float64) * 3 + 0.2]

    def loss(lg, rw):
        pyr = _pyramid([lg], [torch.nn.functional.softplus(rw)])
        return localization_loss(pyr, labels, targets)[2]

    loss(logits, raw).backward()
    num_l = central_difference(lambda x: loss(x, raw.detach()), logits)
    num_r = central_difference(lambda x: loss(logits.detach(), x), raw)
    assert relative_error(logits.grad, num_l) < 1e-3
    assert relative_error(raw.grad, num_r) < 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        GroundingConfig(gaze_mode="sideways")
    with pytest.raises(ValueError):
        GroundingConfig(n_pyramid_levels=0)
