import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeadapt.errors import ArchitectureError, ConfigurationError, DegenerateVectorError, ShapeError
from gazeadapt.nets import (Discriminator2D, Discriminator3D, FeatureSelection, GazeRegressor,
                            ImportanceVector, assemble_feature_stack, build_discriminator,
                            double_level_grid, forward_discriminator_2d, forward_discriminator_3d,
                            forward_regressor, init_target_from_source, regressor_shape_trace,
                            single_level_grid, stack_geometry)


@pytest.fixture(scope="module")
def batch():
    return torch.rand(3, 1, 35, 55, generator=torch.Generator().manual_seed(1)) * 2 - 1


@pytest.fixture(scope="module")
def taps(regressor, batch):
    with torch.no_grad():
        return forward_regressor(regressor, batch)[1]


# -- regressor -----------------------------------------------------------------


def test_shape_trace_arithmetic():
    tr = regressor_shape_trace()
    assert tr["C5"] == (10, 20) and tr["P2"] == (5, 10)
    assert tr["flat"] == 192 * 5 * 10 == 9600


def test_forward_tap_shapes(taps):
    assert taps["C1"].shape == (3, 32, 33, 53)
    assert taps["C3"].shape == (3, 64, 29, 49)
    assert taps["C5"].shape == (3, 192, 10, 20)
    assert taps["FC1"].shape == (3, 9600)


@pytest.mark.parametrize("padding", [1, 2])
def test_other_padding_rejected(padding):
    assert regressor_shape_trace(padding)["flat"] != 9600
    with pytest.raises(ArchitectureError):
        GazeRegressor(padding=padding)


def test_predictions_are_unit_vectors(regressor, batch):
    with torch.no_grad():
        pred, _ = forward_regressor(regressor, batch)
    assert torch.allclose(pred.norm(dim=1), torch.ones(3), atol=1e-6)


def test_zero_network_reports_degenerate_norm(batch):
    net = GazeRegressor()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        assert torch.count_nonzero(net.regress_raw(net.features(batch)["FC1"])) == 0
        with pytest.raises(DegenerateVectorError):
            forward_regressor(net, batch)


def test_wrong_input_shape(regressor):
    with pytest.raises(ShapeError):
        forward_regressor(regressor, torch.zeros(2, 1, 36, 55))


def test_partition_exhaustive_and_disjoint(regressor):
    part = regressor.partition()
    names = {n for n, _ in regressor.named_parameters()}
    assert set(part["feature"]) | set(part["regression"]) == names
    assert not set(part["feature"]) & set(part["regression"])
    assert {n.split(".")[0] for n in part["regression"]} == {"fc2", "fc3"}


# -- feature selection & stack ---------------------------------------------------


def test_selection_arity():
    assert FeatureSelection.parse("C3C5").taps == ("C3", "C5")
    assert FeatureSelection.parse("C3C5").k == 3
    with pytest.raises(ConfigurationError):
        FeatureSelection(("C1", "C2", "C3"))
    with pytest.raises(ConfigurationError):
        FeatureSelection.parse("C6")
    assert len(single_level_grid()) == 5 and len(double_level_grid()) == 10


def test_unit_importance_is_plain_concat(taps):
    sel = FeatureSelection(("C5",))
    a = assemble_feature_stack(taps, sel, ImportanceVector(2))
    b = assemble_feature_stack(taps, sel)
    assert torch.equal(a.data, b.data)


def test_c5_plus_fc1_channel_count(taps):
    stack = assemble_feature_stack(taps, FeatureSelection(("C5",)))
    assert stack.data.shape == (3, 384, 10, 20)
    assert stack.provenance == [("C5", 0, 192), ("FC1", 192, 384)]
    assert stack_geometry(FeatureSelection(("C5",))) == ((10, 20), 384, 1)


def test_importance_scales_exactly_one_group(taps):
    sel = FeatureSelection(("C5",))
    base = assemble_feature_stack(taps, sel).data
    scaled = assemble_feature_stack(taps, sel, torch.tensor([2.0, 1.0])).data
    assert torch.equal(scaled[:, :192], base[:, :192] * 2.0)
    assert torch.equal(scaled[:, 192:], base[:, 192:])


def test_importance_length_mismatch(taps):
    with pytest.raises(ConfigurationError):
        assemble_feature_stack(taps, FeatureSelection(("C5",)), ImportanceVector(3))


def test_double_level_volume(taps):
    stack = assemble_feature_stack(taps, FeatureSelection(("C3", "C5")))
    assert stack.volumetric and stack.data.shape == (3, 192, 3, 29, 49)
    # C3 has 64 channels, zero padded to 192
    assert torch.count_nonzero(stack.data[:, 64:, 0]) == 0
    # resized taps match a direct bilinear resize
    ref = torch.nn.functional.interpolate(taps["C5"], size=(29, 49), mode="bilinear", align_corners=False)
    assert torch.equal(stack.data[:, :, 1], ref)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["C1", "C2", "C3", "C4", "C5", "FC1"]), st.floats(-3, 3, allow_nan=False))
def test_unit_importance_commutes_with_scaling(tap, scale):
    g = torch.Generator().manual_seed(0)
    fake = {"C1": torch.randn(2, 32, 33, 53, generator=g), "C2": torch.randn(2, 32, 31, 51, generator=g),
            "C3": torch.randn(2, 64, 29, 49, generator=g), "C4": torch.randn(2, 80, 12, 22, generator=g),
            "C5": torch.randn(2, 192, 10, 20, generator=g), "FC1": torch.randn(2, 9600, generator=g)}
    sel = FeatureSelection(("C2",)) if tap in ("FC1", "C2") else FeatureSelection((tap,))
    idx = sel.all_taps.index(tap)
    scaled = dict(fake, **{tap: fake[tap] * scale})
    lhs = assemble_feature_stack(scaled, sel, torch.ones(sel.k)).data
    weights = torch.ones(sel.k)
    weights[idx] = scale
    rhs = assemble_feature_stack(fake, sel, weights).data
    assert torch.allclose(lhs, rhs, atol=1e-5)


# -- discriminators ------------------------------------------------------------------


def test_disc2d_deterministic_without_dropout(taps):
    torch.manual_seed(0)
    d = Discriminator2D(384, (10, 20)).eval()
    stack = assemble_feature_stack(taps, FeatureSelection(("C5",)))
    assert torch.equal(forward_discriminator_2d(d, stack), forward_discriminator_2d(d, stack))


def test_disc2d_gan_range_and_trace():
    torch.manual_seed(0)
    d = Discriminator2D(8, (10, 20))
    x = torch.randn(16, 8, 10, 20) * 3
    s = d(x)
    assert ((s > 0) & (s < 1)).all()
    # same-padded stride-2 trace: 10x20 -> 5x10 -> 3x5 -> 2x3
    assert d.fc.in_features == 64 * 2 * 3
    h = x
    for conv in d.convs:
        h = conv(h)
    assert h.shape[-2:] == (2, 3)


def test_disc_wgan_is_unbounded():
    torch.manual_seed(0)
    d = Discriminator2D(8, (10, 20), mode="wgan").eval()
    with torch.no_grad():
        d.fc.bias.fill_(5.0)
    assert (d(torch.zeros(2, 8, 10, 20)) == 5.0).all()


def test_disc_too_small():
    with pytest.raises(ConfigurationError, match="minimum size is 9x9"):
        Discriminator2D(8, (5, 10))


def test_disc3d_preserves_depth_and_range():
    torch.manual_seed(0)
    d = Discriminator3D(8, 2, (10, 20))
    x = torch.randn(4, 8, 2, 10, 20)
    h = x
    for conv in d.convs:
        h = conv(h)
        assert h.shape[2] == 2
    s = forward_discriminator_3d(d, x)
    assert s.shape == (4,) and ((s > 0) & (s < 1)).all()


def test_disc3d_order_sensitivity():
    x = torch.randn(1, 8, 2, 10, 20, generator=torch.Generator().manual_seed(3))
    swapped = x.flip(2)
    changed = 0
    for seed in range(100):
        torch.manual_seed(seed)
        d = Discriminator3D(8, 2, (10, 20)).eval()
        with torch.no_grad():
            changed += bool(d(x) != d(swapped))
    assert changed / 100 > 0.99 - 1e-12


def test_build_discriminator_dispatch():
    assert isinstance(build_discriminator(FeatureSelection(("C4",))), Discriminator2D)
    d3 = build_discriminator(FeatureSelection(("C1", "C5")))
    assert isinstance(d3, Discriminator3D)


# -- target initialisation --------------------------------------------------------------


def test_init_target_from_source(regressor, batch):
    src = copy.deepcopy(regressor)
    tgt = init_target_from_source(src)
    assert src.frozen and not tgt.frozen
    assert all(not p.requires_grad for p in src.parameters())
    for (n, a), (_, b) in zip(src.state_dict().items(), tgt.state_dict().items()):
        assert torch.equal(a, b), n
    with torch.no_grad():
        ref = src(batch)
        composed = torch.nn.functional.normalize(src.regress_raw(tgt.features(batch)["FC1"]), dim=1)
        assert torch.equal(composed, ref)
        tgt.c1.weight.add_(1.0)
    assert not torch.equal(src.c1.weight, tgt.c1.weight)
    assert torch.equal(src.c1.weight, regressor.c1.weight)
