import math

import numpy as np
import pytest

from eqdp import autodiff as ad
from eqdp.groups import FieldType, GroupElement, GroupSpec, enumerate_elements, regular, trivial
from eqdp.layers import (
    EquivariantConv, EquivariantGroupNorm, FourierActivation, GroupPool, IIDInstanceNorm, IrrepFieldType, Linear,
    NonIrrepFieldType, PointwiseActivation, Restriction, weight_standardize,
)
from eqdp.model import layer_equivariance, relative_error

D4 = GroupSpec("dihedral", 4)
C4 = GroupSpec("cyclic", 4)
C8 = GroupSpec("cyclic", 8)
SO2 = GroupSpec("so2", max_frequency=2)
RNG = np.random.default_rng


def _run(layer, x):
    return layer(ad.batch(x)).data


# -- weight standardization

def test_ws_idempotent_on_standardized_kernel():
    ft = FieldType.of(D4, "regular", 2)
    k = RNG(0).standard_normal((16, 5, 3, 3))
    once = weight_standardize(k, ft)
    np.testing.assert_allclose(weight_standardize(once, ft), once, atol=1e-6)


def test_ws_constant_kernel_goes_to_zero():
    ft = FieldType.of(D4, "regular", 1)
    np.testing.assert_array_equal(weight_standardize(np.full((8, 3, 3, 3), 2.5), ft), 0.0)


def test_ws_commutes_with_steering_d4():
    fin, fout = FieldType.of(D4, "regular", 1), FieldType.of(D4, "regular", 2)
    conv = EquivariantConv(fin, fout, standardize=False, rng=RNG(1))
    kern = conv.kernel().data
    for g in enumerate_elements(D4):
        steered = np.einsum("ao,obij,bc->acij", fout.rep_matrix(g),
                            np.rot90(np.flip(kern, -1) if g.reflect else kern, g.quarter_turns, axes=(-2, -1)),
                            fin.rep_matrix(g.inverse()))
        np.testing.assert_allclose(weight_standardize(steered, fout, fin),
                                   np.einsum("ao,obij,bc->acij", fout.rep_matrix(g),
                                             np.rot90(np.flip(weight_standardize(kern, fout, fin), -1)
                                                      if g.reflect else weight_standardize(kern, fout, fin),
                                                      g.quarter_turns, axes=(-2, -1)),
                                             fin.rep_matrix(g.inverse())), atol=1e-12)


def test_ws_gradient():
    ft = FieldType.of(C4, "regular", 2)
    w = ad.Parameter(RNG(2).standard_normal((8, 3, 3, 3)))
    x = RNG(3).standard_normal((2, 3, 5, 5))
    f = lambda: ad.sum(ad.conv2d(ad.batch(x), weight_standardize(w, ft), 1), axis=(1, 2, 3))
    assert ad.finite_difference_check(f, [w], max_coords=100) < 1e-6


# -- convolution

def test_conv_trivial_group_is_plain_convolution():
    e = GroupSpec("cyclic", 1)
    conv = EquivariantConv(FieldType.of(e, "trivial", 2), FieldType.of(e, "trivial", 3), rng=RNG(4))
    x = RNG(5).standard_normal((2, 2, 6, 6))
    k = conv.kernel()
    np.testing.assert_array_equal(_run(conv, x), ad.conv2d(ad.batch(x), k, 1).data)


def test_conv_zero_coefficients_zero_output():
    conv = EquivariantConv(FieldType.of(C4, "regular", 1), FieldType.of(C4, "regular", 1), standardize=False)
    for p in conv.parameters():
        p.data[:] = 0
    assert not np.any(_run(conv, RNG(6).standard_normal((1, 4, 5, 5))))


@pytest.mark.parametrize("group", [C4, D4, C8], ids=lambda g: g.name)
def test_conv_equivariance_circular(group):
    fin, fout = FieldType.of(group, "trivial", 3), FieldType.of(group, "regular", 2)
    conv = EquivariantConv(fin, fout, padding_mode="circular", rng=RNG(7))
    assert layer_equivariance(conv, RNG(8).standard_normal((2, 3, 8, 8))) < 1e-5
    conv2 = EquivariantConv(fout, fout, padding_mode="circular", rng=RNG(9))
    assert layer_equivariance(conv2, RNG(10).standard_normal((2, fout.total_channels, 8, 8))) < 1e-5


def test_conv_c4_rotation_direct():
    ft = FieldType.of(C4, "regular", 1)
    conv = EquivariantConv(ft, ft, padding_mode="circular", rng=RNG(11))
    x = RNG(12).standard_normal((1, 4, 6, 6))
    g = GroupElement(math.pi / 2)
    assert relative_error(_run(conv, ft.transform(x, g)), ft.transform(_run(conv, x), g)) < 1e-5


def test_conv_so2_quarter_turns():
    ft = FieldType.bandlimited(SO2, 2)
    conv = EquivariantConv(ft, ft, padding_mode="circular", rng=RNG(13))
    assert layer_equivariance(conv, RNG(14).standard_normal((2, ft.total_channels, 6, 6))) < 1e-10


# -- equivariant group norm

def test_group_norm_identity_on_normalized_input():
    ft = FieldType.of(D4, "regular", 1)
    norm = EquivariantGroupNorm(ft, num_groups=1)
    x = RNG(15).standard_normal((2, 8, 5, 5))
    x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
    np.testing.assert_allclose(_run(norm, x), x / math.sqrt(1 + 1e-5), atol=1e-6)


def test_group_norm_constant_input_gives_bias():
    ft = FieldType.of(D4, "regular", 2)
    norm = EquivariantGroupNorm(ft)
    norm.bias.data[:] = [0.3, -0.7]
    out = _run(norm, np.full((1, 16, 4, 4), 5.0))
    np.testing.assert_allclose(out[0, :8], 0.3)
    np.testing.assert_allclose(out[0, 8:], -0.7)


def test_group_norm_permutation_commutes_d4():
    ft = FieldType.of(D4, "regular", 4)
    norm = EquivariantGroupNorm(ft, num_groups=2)
    norm.weight.data[:] = RNG(16).uniform(0.5, 2, 4)
    norm.bias.data[:] = RNG(17).standard_normal(4)
    x = RNG(18).standard_normal((3, 32, 4, 4)) * 3 + 1
    base = _run(norm, x)
    for g in enumerate_elements(D4):
        m = ft.rep_matrix(g)
        moved = _run(norm, np.einsum("oc,bchw->bohw", m, x))
        np.testing.assert_allclose(moved, np.einsum("oc,bchw->bohw", m, base), atol=1e-10)


def test_group_norm_rejects_irreps():
    with pytest.raises(IrrepFieldType):
        EquivariantGroupNorm(FieldType.bandlimited(SO2, 1))


# -- i.i.d. instance norm

def test_iid_norm_constant_trivial_field_zero():
    so2 = GroupSpec("so2", max_frequency=0)
    norm = IIDInstanceNorm(FieldType.bandlimited(so2, 2))
    assert not np.any(_run(norm, np.full((1, 2, 3, 3), 4.2)))


def test_iid_norm_unit_lambda_input():
    so2 = GroupSpec("so2", max_frequency=1)
    ft = FieldType(so2, ((ft_rep, 1) for ft_rep in FieldType.bandlimited(so2, 1).representations()[1:]))
    x = RNG(19).standard_normal((1, 2, 4, 4))
    x /= np.sqrt((x ** 2).sum(axis=1).mean() / 2)
    norm = IIDInstanceNorm(ft)
    np.testing.assert_allclose(_run(norm, x), x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_iid_norm_normalizes_and_commutes_with_rotation():
    ft = FieldType.bandlimited(SO2, 3)
    norm = IIDInstanceNorm(ft)
    x = RNG(20).standard_normal((2, ft.total_channels, 5, 5)) * 4 + 1
    out = _run(norm, x)
    for sl in ft.field_slices():
        d = sl.stop - sl.start
        lam = (out[:, sl] ** 2).sum(axis=1).mean(axis=(1, 2)) / d
        np.testing.assert_allclose(lam, 1.0, atol=1e-5)
    for a in RNG(21).uniform(0, 2 * math.pi, 10):
        m = ft.rep_matrix(GroupElement(a))
        moved = _run(norm, np.einsum("oc,bchw->bohw", m, x))
        np.testing.assert_allclose(moved, np.einsum("oc,bchw->bohw", m, out), atol=1e-10)


def test_iid_norm_rejects_regular():
    with pytest.raises(NonIrrepFieldType):
        IIDInstanceNorm(FieldType.of(D4, "regular", 1))


# -- activations

def test_pointwise_commutes_with_permutations_c8():
    ft = FieldType.of(C8, "regular", 2)
    act = PointwiseActivation(ft, "mish")
    x = RNG(22).standard_normal((2, 16, 3, 3))
    for g in enumerate_elements(C8):
        m = ft.rep_matrix(g)
        np.testing.assert_allclose(_run(act, np.einsum("oc,bchw->bohw", m, x)),
                                   np.einsum("oc,bchw->bohw", m, _run(act, x)), atol=1e-14)


def test_pointwise_rejects_irreps():
    with pytest.raises(IrrepFieldType):
        PointwiseActivation(FieldType.bandlimited(SO2, 1))


def test_fourier_identity_round_trip():
    ft = FieldType.bandlimited(SO2, 3)
    act = FourierActivation(ft, "identity", num_samples=8)
    x = RNG(23).standard_normal((2, ft.total_channels, 3, 3))
    np.testing.assert_allclose(_run(act, x), x, atol=1e-10)


def test_fourier_relu_on_positive_constant():
    ft = FieldType.bandlimited(SO2, 1)
    x = np.zeros((1, ft.total_channels, 2, 2))
    x[:, [s.start for s in ft.field_slices() if s.stop - s.start == 1]] = 1.7
    np.testing.assert_allclose(_run(FourierActivation(ft, "relu"), x), x, atol=1e-12)


def test_fourier_grid_angles_commute_exactly():
    ft = FieldType.bandlimited(SO2, 2)
    act = FourierActivation(ft, "mish", num_samples=8)
    x = RNG(24).standard_normal((2, ft.total_channels, 3, 3))
    out = _run(act, x)
    for j in range(8):
        m = ft.rep_matrix(GroupElement(2 * math.pi * j / 8))
        np.testing.assert_allclose(_run(act, np.einsum("oc,bchw->bohw", m, x)),
                                   np.einsum("oc,bchw->bohw", m, out), atol=1e-12)
    m = ft.rep_matrix(GroupElement(0.3))
    off = relative_error(_run(act, np.einsum("oc,bchw->bohw", m, x)), np.einsum("oc,bchw->bohw", m, out))
    assert off < 0.5  # aliasing only, bounded


# -- pooling, restriction, head

def test_group_pool():
    ft = FieldType(D4, ((regular(D4), 2), (trivial(D4), 1)))
    gp = GroupPool(ft)
    x = RNG(25).standard_normal((2, 17, 3, 3))
    out = _run(gp, x)
    np.testing.assert_allclose(out[:, 0], x[:, :8].mean(axis=1), atol=1e-14)
    np.testing.assert_array_equal(out[:, 2], x[:, 16])
    proj = ft.haar_projector()
    np.testing.assert_allclose(out[:, 0], np.einsum("oc,bchw->bohw", proj, x)[:, 0], atol=1e-14)
    for g in enumerate_elements(D4):
        np.testing.assert_allclose(_run(gp, ft.transform(x, g)), np.rot90(np.flip(out, -1) if g.reflect else out,
                                                                          g.quarter_turns, axes=(-2, -1)),
                                   atol=1e-14)


def test_restriction_layer():
    triv = Restriction(FieldType.of(D4, "trivial", 3))
    x = RNG(26).standard_normal((1, 3, 4, 4))
    np.testing.assert_array_equal(_run(triv, x), x)

    ft = FieldType.of(C4, "regular", 2)
    r = Restriction(ft)
    x = RNG(27).standard_normal((2, 8, 4, 4))
    y = _run(r, x)
    np.testing.assert_allclose(np.einsum("oc,bchw->bohw", r.basis, y), x, atol=1e-14)
    conv = EquivariantConv(r.field_out, r.field_out, padding_mode="circular", rng=RNG(28))
    assert layer_equivariance(conv, y) < 1e-5
    assert layer_equivariance(r, x) < 1e-14


def test_linear_head_requires_invariant_input():
    from eqdp.groups import GroupError
    with pytest.raises(GroupError):
        Linear(FieldType.of(D4, "regular", 1), 3)
    lin = Linear(FieldType.of(D4, "trivial", 10), 2)
    assert sum(p.data.size for p in lin.parameters()) == 22
