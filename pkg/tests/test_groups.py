import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqdp.groups import (
    ContinuousGroup, ElementGroupMismatch, FieldType, GroupElement, GroupSpec, OddRotationOrder, Undersampled,
    enumerate_elements, group_fourier_pair, haar_mean_projector, irrep, regular, rep_matrix, restrict, trivial,
)

FINITE = [GroupSpec("cyclic", n) for n in (1, 2, 3, 4, 8)] + [GroupSpec("dihedral", n) for n in (1, 2, 4, 8)]


def test_enumerate_c1_c4_d4():
    assert enumerate_elements(GroupSpec("cyclic", 1)) == [GroupElement(0.0)]
    c4 = enumerate_elements(GroupSpec("cyclic", 4))
    assert [round(g.rotation_angle, 12) for g in c4] == [round(a, 12) for a in (0, math.pi / 2, math.pi, 3 * math.pi / 2)]
    d4 = enumerate_elements(GroupSpec("dihedral", 4))
    assert len(d4) == 8 and len(set(d4)) == 8
    assert sum(g.reflect for g in d4) == 4


def test_so2_has_no_enumeration():
    with pytest.raises(ContinuousGroup):
        enumerate_elements(GroupSpec("so2", max_frequency=2))


def test_parse_names():
    assert GroupSpec.parse("D4") == GroupSpec("dihedral", 4)
    assert GroupSpec.parse("c8").order == 8
    assert GroupSpec.parse("SO2[3]").max_frequency == 3
    assert GroupSpec.parse("e").order == 1


def test_rep_matrix_examples():
    so2 = GroupSpec("so2", max_frequency=1)
    assert np.array_equal(rep_matrix(trivial(so2), GroupElement(1.234)), [[1.0]])
    np.testing.assert_allclose(rep_matrix(irrep(so2, 1), GroupElement(math.pi / 2)), [[0, -1], [1, 0]], atol=1e-15)
    c2 = GroupSpec("cyclic", 2)
    np.testing.assert_array_equal(rep_matrix(regular(c2), GroupElement(math.pi)), [[0, 1], [1, 0]])


def test_rep_matrix_rejects_foreign_elements():
    with pytest.raises(ElementGroupMismatch):
        rep_matrix(regular(GroupSpec("cyclic", 4)), GroupElement(math.pi / 4))
    with pytest.raises(ElementGroupMismatch):
        rep_matrix(regular(GroupSpec("cyclic", 4)), GroupElement(0.0, True))


@pytest.mark.parametrize("group", FINITE, ids=lambda g: g.name)
def test_homomorphism_and_orthogonality(group):
    reps = [trivial(group), regular(group)]
    if group.kind == "cyclic":
        reps += [irrep(group, f) for f in range(group.rotation_order // 2 + 1)]
    els = enumerate_elements(group)
    for rep in reps:
        for g in els:
            m = rep_matrix(rep, g)
            np.testing.assert_allclose(m.T @ m, np.eye(rep.dimension), atol=1e-12)
            for h in els:
                np.testing.assert_allclose(rep_matrix(rep, g * h), m @ rep_matrix(rep, h), atol=1e-12)


def test_dihedral_composition_rule():
    d = GroupSpec("dihedral", 8)
    step = 2 * math.pi / 8
    for a in range(8):
        for e in (False, True):
            for b in range(8):
                for f in (False, True):
                    prod = GroupElement(a * step, e) * GroupElement(b * step, f)
                    expect = GroupElement((a + (-1) ** e * b) * step, e != f)
                    assert d.index(prod) == d.index(expect)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2 * math.pi), min_size=20, max_size=20), st.integers(0, 4))
def test_so2_irreps_orthogonal_and_multiplicative(angles, f):
    rep = irrep(GroupSpec("so2", max_frequency=4), f)
    for a, b in zip(angles, angles[1:]):
        m = rep_matrix(rep, GroupElement(a))
        np.testing.assert_allclose(m.T @ m, np.eye(rep.dimension), atol=1e-12)
        np.testing.assert_allclose(rep_matrix(rep, GroupElement(a) * GroupElement(b)),
                                   m @ rep_matrix(rep, GroupElement(b)), atol=1e-12)


def test_haar_projector_examples():
    so2 = GroupSpec("so2", max_frequency=1)
    assert np.array_equal(haar_mean_projector(trivial(so2)), [[1.0]])
    assert np.array_equal(haar_mean_projector(irrep(so2, 1)), np.zeros((2, 2)))
    for n in (2, 3, 5, 8):
        np.testing.assert_allclose(haar_mean_projector(regular(GroupSpec("cyclic", n))), np.full((n, n), 1 / n))


@pytest.mark.parametrize("group", FINITE, ids=lambda g: g.name)
def test_haar_projector_idempotent_and_invariant(group):
    for rep in (trivial(group), regular(group)):
        p = haar_mean_projector(rep)
        np.testing.assert_allclose(p @ p, p, atol=1e-10)
        for g in enumerate_elements(group):
            np.testing.assert_allclose(p @ rep_matrix(rep, g), p, atol=1e-12)
            np.testing.assert_allclose(rep_matrix(rep, g) @ p, p, atol=1e-12)


def test_haar_projector_so2_sampled_angles():
    so2 = GroupSpec("so2", max_frequency=3)
    ft = FieldType.bandlimited(so2, 2)
    p = ft.haar_projector()
    for a in np.random.default_rng(0).uniform(0, 2 * math.pi, 100):
        m = ft.rep_matrix(GroupElement(a))
        np.testing.assert_allclose(p @ m, p, atol=1e-12)


def test_haar_projector_zero_iff_no_trivial_component():
    c4 = GroupSpec("cyclic", 4)
    assert np.any(haar_mean_projector(irrep(c4, 0)))
    assert not np.any(haar_mean_projector(irrep(c4, 1)))
    assert not np.any(haar_mean_projector(irrep(c4, 2)))


def test_field_type_merges_and_describes():
    d4 = GroupSpec("dihedral", 4)
    a = FieldType(d4, ((regular(d4), 1),) * 3)
    assert a == FieldType.of(d4, "regular", 3)
    assert a.total_channels == 24 and a.num_fields == 3
    assert a.describe() == "D4:regularx3"


@pytest.mark.parametrize("group", [GroupSpec("cyclic", 4), GroupSpec("cyclic", 8), GroupSpec("dihedral", 4),
                                   GroupSpec("dihedral", 8)], ids=lambda g: g.name)
def test_restriction_preserves_subgroup_action(group):
    ft = FieldType(group, ((regular(group), 2), (trivial(group), 3)))
    sub_ft, b = restrict(ft)
    assert sub_ft.group.rotation_order == group.rotation_order // 2
    assert sub_ft.group.kind == group.kind
    np.testing.assert_allclose(b.T @ b, np.eye(ft.total_channels), atol=1e-12)
    for h in enumerate_elements(sub_ft.group):
        np.testing.assert_allclose(sub_ft.rep_matrix(h), b.T @ ft.rep_matrix(h) @ b, atol=1e-10)


def test_restrict_regular_c4_is_two_regular_c2_by_cosets():
    c4 = GroupSpec("cyclic", 4)
    sub_ft, b = restrict(FieldType.of(c4, "regular", 1))
    assert sub_ft == FieldType.of(GroupSpec("cyclic", 2), "regular", 2)
    assert set(np.unique(b)) <= {0.0, 1.0} and np.all(b.sum(axis=0) == 1)


def test_restrict_trivial_d8_identity():
    sub_ft, b = restrict(FieldType.of(GroupSpec("dihedral", 8), "trivial", 4))
    assert sub_ft == FieldType.of(GroupSpec("dihedral", 4), "trivial", 4)
    np.testing.assert_array_equal(b, np.eye(4))


def test_restrict_so2_keeps_frequency_zero():
    so2 = GroupSpec("so2", max_frequency=2)
    ft = FieldType.bandlimited(so2, 3)
    sub_ft, b = restrict(ft)
    assert sub_ft.is_trivial and sub_ft.total_channels == 3
    x = np.random.default_rng(1).standard_normal(ft.total_channels)
    kept = b.T @ x
    np.testing.assert_array_equal(kept, x[[s.start for s in ft.field_slices() if s.stop - s.start == 1]])


def test_restrict_odd_order_rejected():
    with pytest.raises(OddRotationOrder):
        restrict(FieldType.of(GroupSpec("cyclic", 3), "regular", 1))


def test_fourier_pair_examples():
    so2_0 = GroupSpec("so2", max_frequency=0)
    fwd, inv = group_fourier_pair(FieldType.bandlimited(so2_0, 1), 1)
    assert np.array_equal(fwd, [[1.0]]) and np.array_equal(inv, [[1.0]])

    so2 = GroupSpec("so2", max_frequency=2)
    ft = FieldType.bandlimited(so2, 1)
    fwd, inv = group_fourier_pair(ft, 8)
    coef = np.random.default_rng(0).standard_normal(ft.total_channels)
    np.testing.assert_allclose(fwd @ (inv @ coef), coef, atol=1e-10)

    only1 = np.zeros(ft.total_channels)
    only1[1:3] = [1.0, 0.0]
    theta = 2 * np.pi * np.arange(8) / 8
    samples = inv @ only1
    np.testing.assert_allclose(samples / samples.max(), np.cos(theta), atol=1e-12)


def test_fourier_undersampled():
    ft = FieldType.bandlimited(GroupSpec("so2", max_frequency=2), 1)
    with pytest.raises(Undersampled):
        group_fourier_pair(ft, 4)


def test_fourier_sample_grid_rotation_commutes():
    so2 = GroupSpec("so2", max_frequency=2)
    ft = FieldType.bandlimited(so2, 1)
    fwd, inv = group_fourier_pair(ft, 8)
    coef = np.random.default_rng(3).standard_normal(ft.total_channels)
    g = GroupElement(2 * np.pi / 8)
    # rotating the coefficients shifts the samples by one grid step
    np.testing.assert_allclose(inv @ (ft.rep_matrix(g) @ coef), np.roll(inv @ coef, 1), atol=1e-12)
