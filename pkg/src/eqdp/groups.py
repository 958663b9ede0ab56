"""Planar symmetry groups, their representations and feature-field types.

Finite groups are the cyclic groups C_N (rotations by multiples of 2*pi/N)
and the dihedral groups D_N (the same rotations plus reflections).  SO(2) is
handled through its irreducible representations up to a band limit.

Geometric convention used everywhere in the package: a pixel at
``(row, col)`` of an ``H x W`` grid sits at the point ``x = col - c_x``,
``y = c_y - row`` (y points up).  A rotation by ``theta`` is counterclockwise
and the reflection generator mirrors left-right, ``(x, y) -> (-x, y)``.  A
group element ``r^k s^e`` acts on points as ``R_k S^e``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterator, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class GroupError(ValueError):
    """Base class for group and representation errors."""


class ContinuousGroup(GroupError):
    pass


class ElementGroupMismatch(GroupError):
    pass


class OddRotationOrder(GroupError):
    pass


class Undersampled(GroupError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    kind: str
    rotation_order: int = 1
    max_frequency: int = 1

    def __post_init__(self):
        if self.kind not in ("cyclic", "dihedral", "so2"):
            raise GroupError(f"unknown group kind {self.kind!r}")
        if self.rotation_order < 1:
            raise GroupError("rotation_order must be >= 1")
        if self.max_frequency < 0:
            raise GroupError("max_frequency must be >= 0")
        if self.kind == "so2" and self.rotation_order != 1:
            # rotation_order is meaningless for SO(2); normalise it so that
            # equal groups compare equal.
            object.__setattr__(self, "rotation_order", 1)
        if self.kind != "so2" and self.max_frequency != 1:
            object.__setattr__(self, "max_frequency", 1)

    @property
    def is_finite(self) -> bool:
        return self.kind != "so2"

    @property
    def order(self) -> int | None:
        """Number of elements; ``None`` for SO(2)."""
        if self.kind == "cyclic":
            return self.rotation_order
        if self.kind == "dihedral":
            return 2 * self.rotation_order
        return None

    @property
    def name(self) -> str:
        if self.kind == "cyclic":
            return f"C{self.rotation_order}"
        if self.kind == "dihedral":
            return f"D{self.rotation_order}"
        return f"SO2[{self.max_frequency}]"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "GroupSpec":
        """Parse names such as ``C4``, ``D8``, ``SO2`` or ``SO2[3]``; ``e`` is C1."""
        t = text.strip()
        if t in ("e", "{e}", "trivial"):
            return cls("cyclic", 1)
        up = t.upper()
        if up.startswith("SO2"):
            rest = up[3:].strip("[]() ")
            return cls("so2", 1, int(rest) if rest else 1)
        if up[:1] in ("C", "D") and up[1:].isdigit():
            return cls("cyclic" if up[0] == "C" else "dihedral", int(up[1:]))
        raise GroupError(f"cannot parse group {text!r}")

    def identity(self) -> "GroupElement":
        return GroupElement(0.0, False)

    def contains(self, g: "GroupElement") -> bool:
        if g.reflect and self.kind != "dihedral":
            return False
        if self.kind == "so2":
            return True
        return _rotation_step(g.rotation_angle, self.rotation_order) is not None

    def index(self, g: "GroupElement") -> int:
        """Canonical index of ``g`` (lexicographic in (rotation_k, reflect))."""
        if not self.is_finite:
            raise ContinuousGroup("SO(2) elements have no finite index")
        k = _rotation_step(g.rotation_angle, self.rotation_order)
        if k is None or (g.reflect and self.kind != "dihedral"):
            raise ElementGroupMismatch(f"{g} is not an element of {self.name}")
        if self.kind == "dihedral":
            return 2 * k + int(g.reflect)
        return k

    def element(self, index: int) -> "GroupElement":
        if self.kind == "dihedral":
            k, r = divmod(index, 2)
        else:
            k, r = index, 0
        return GroupElement(TWO_PI * k / self.rotation_order, bool(r))

    def exact_elements(self) -> list["GroupElement"]:
        """Elements whose action on the pixel grid is an exact permutation.

        These are rotations by multiples of 90 degrees and reflections.  For
        SO(2) they are the four quarter turns.
        """
        if self.kind == "so2":
            return [GroupElement(TWO_PI * k / 4, False) for k in range(4)]
        return [g for g in enumerate_elements(self) if g.is_exact]


def _rotation_step(angle: float, n: int) -> int | None:
    x = angle * n / TWO_PI
    k = round(x)
    if abs(x - k) > 1e-9:
        return None
    return int(k) % n


def _wrap(angle: float) -> float:
    a = math.fmod(angle, TWO_PI)
    if a < 0:
        a += TWO_PI
    if TWO_PI - a < 1e-12:
        a = 0.0
    return a


@dataclass(frozen=True)
class GroupElement:
    rotation_angle: float
    reflect: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rotation_angle", _wrap(float(self.rotation_angle)))

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        # (r^a s^e)(r^b s^d) = r^(a + (-1)^e b) s^(e xor d)
        b = -other.rotation_angle if self.reflect else other.rotation_angle
        return GroupElement(self.rotation_angle + b, self.reflect != other.reflect)

    def inverse(self) -> "GroupElement":
        if self.reflect:
            return self
        return GroupElement(-self.rotation_angle, False)

    @property
    def quarter_turns(self) -> int | None:
        return _rotation_step(self.rotation_angle, 4)

    @property
    def is_exact(self) -> bool:
        return self.quarter_turns is not None

    def point_matrix(self) -> np.ndarray:
        """2x2 matrix of the action on plane coordinates (x, y)."""
        c, s = math.cos(self.rotation_angle), math.sin(self.rotation_angle)
        rot = np.array([[c, -s], [s, c]])
        if self.reflect:
            rot = rot @ np.array([[-1.0, 0.0], [0.0, 1.0]])
        return rot

    def __repr__(self) -> str:
        deg = math.degrees(self.rotation_angle)
        return f"GroupElement({deg:.6g}deg{', reflect' if self.reflect else ''})"


def enumerate_elements(group: GroupSpec) -> list[GroupElement]:
    if not group.is_finite:
        raise ContinuousGroup("SO(2) has infinitely many elements")
    return [group.element(i) for i in range(group.order)]


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Representation:
    group: GroupSpec
    kind: str
    frequency: int = 0

    def __post_init__(self):
        if self.kind not in ("trivial", "regular", "irrep"):
            raise GroupError(f"unknown representation kind {self.kind!r}")
        if self.kind == "regular" and not self.group.is_finite:
            raise ContinuousGroup("SO(2) has no finite regular representation")
        if self.kind == "irrep":
            if self.group.kind == "dihedral":
                raise GroupError("dihedral irreps are not supported")
            if self.frequency < 0:
                raise GroupError("irrep frequency must be >= 0")
            if self.group.kind == "cyclic" and 2 * self.frequency > self.group.rotation_order:
                raise GroupError("cyclic irrep frequency must be <= N/2")
        elif self.frequency != 0:
            object.__setattr__(self, "frequency", 0)

    @property
    def dimension(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "regular":
            return self.group.order
        f = self.frequency
        if f == 0:
            return 1
        if self.group.kind == "cyclic" and 2 * f == self.group.rotation_order:
            return 1
        return 2

    @property
    def is_trivial(self) -> bool:
        return self.kind == "trivial" or (self.kind == "irrep" and self.frequency == 0) or (
            self.kind == "regular" and self.group.order == 1
        )

    @property
    def name(self) -> str:
        if self.kind == "irrep":
            return f"irrep{self.frequency}"
        return self.kind

    def __call__(self, g: GroupElement) -> np.ndarray:
        return rep_matrix(self, g)

    @cached_property
    def _finite_matrices(self) -> np.ndarray:
        elements = enumerate_elements(self.group)
        mats = np.stack([self._compute(g) for g in elements])
        mats[np.abs(mats) < 1e-14] = 0.0  # cos(pi/2) and friends
        return mats

    def _compute(self, g: GroupElement) -> np.ndarray:
        if self.kind == "trivial":
            return np.ones((1, 1))
        if self.kind == "regular":
            n = self.group.order
            m = np.zeros((n, n))
            for h in range(n):
                m[self.group.index(g * self.group.element(h)), h] = 1.0
            return m
        theta = self.frequency * g.rotation_angle
        if self.dimension == 1:
            return np.array([[round(math.cos(theta))]], dtype=float)
        return _rot2(theta)


def rep_matrix(rep: Representation, g: GroupElement) -> np.ndarray:
    if not rep.group.contains(g):
        raise ElementGroupMismatch(f"{g} is not an element of {rep.group.name}")
    if rep.group.is_finite:
        return rep._finite_matrices[rep.group.index(g)].copy()
    return rep._compute(g)


def haar_mean_projector(rep: Representation) -> np.ndarray:
    """Group average of ``rep``; the orthogonal projector onto invariant vectors."""
    if rep.group.is_finite:
        return rep._finite_matrices.mean(axis=0)
    if rep.is_trivial:
        return np.ones((1, 1))
    return np.zeros((rep.dimension, rep.dimension))


def trivial(group: GroupSpec) -> Representation:
    return Representation(group, "trivial")


def regular(group: GroupSpec) -> Representation:
    return Representation(group, "regular")


def irrep(group: GroupSpec, frequency: int) -> Representation:
    return Representation(group, "irrep", frequency)


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    m = sum(b.shape[1] for b in blocks)
    out = np.zeros((n, m))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


@dataclass(frozen=True)
class FieldType:
    """Ordered list of ``(representation, multiplicity)`` pairs over one group.

    Channels are laid out field by field: the ``i``-th field occupies a
    contiguous block of ``rep.dimension`` channels.
    """

    group: GroupSpec
    fields: tuple[tuple[Representation, int], ...]

    def __post_init__(self):
        merged: list[list] = []
        for r, m in self.fields:
            if int(m) <= 0:
                continue
            if merged and merged[-1][0] == r:
                merged[-1][1] += int(m)
            else:
                merged.append([r, int(m)])
        fields = tuple((r, m) for r, m in merged)
        object.__setattr__(self, "fields", fields)
        for r, _ in fields:
            if r.group != self.group:
                raise GroupError("all representations must belong to the field type's group")
        if self.total_channels < 1:
            raise GroupError("a field type needs at least one channel")

    @classmethod
    def of(cls, group: GroupSpec, rep: Representation | str, multiplicity: int) -> "FieldType":
        if isinstance(rep, str):
            rep = Representation(group, rep)
        return cls(group, ((rep, multiplicity),))

    @classmethod
    def bandlimited(cls, group: GroupSpec, multiplicity: int, max_frequency: int | None = None) -> "FieldType":
        """``multiplicity`` bundles of SO(2) irreps with frequencies 0..F each."""
        f = group.max_frequency if max_frequency is None else max_frequency
        bundle = tuple((irrep(group, k), 1) for k in range(f + 1))
        return cls(group, bundle * multiplicity)

    @property
    def total_channels(self) -> int:
        return sum(r.dimension * m for r, m in self.fields)

    @property
    def size(self) -> int:
        return self.total_channels

    def representations(self) -> list[Representation]:
        """One entry per field (multiplicities expanded)."""
        return [r for r, m in self.fields for _ in range(m)]

    @property
    def num_fields(self) -> int:
        return sum(m for _, m in self.fields)

    def field_slices(self) -> list[slice]:
        out, start = [], 0
        for r in self.representations():
            out.append(slice(start, start + r.dimension))
            start += r.dimension
        return out

    def homogeneous_rep(self) -> Representation | None:
        reps = {r for r, _ in self.fields}
        return reps.pop() if len(reps) == 1 else None

    @property
    def is_trivial(self) -> bool:
        return all(r.is_trivial for r, _ in self.fields)

    def rep_matrix(self, g: GroupElement) -> np.ndarray:
        return _block_diag([rep_matrix(r, g) for r in self.representations()])

    def haar_projector(self) -> np.ndarray:
        return _block_diag([haar_mean_projector(r) for r in self.representations()])

    def __add__(self, other: "FieldType") -> "FieldType":
        if other.group != self.group:
            raise GroupError("cannot concatenate field types over different groups")
        return FieldType(self.group, self.fields + other.fields)

    def describe(self) -> str:
        parts = []
        for r, m in self.fields:
            if parts and parts[-1][0] == r.name:
                parts[-1][1] += m
            else:
                parts.append([r.name, m])
        return f"{self.group.name}:" + ",".join(f"{n}x{m}" for n, m in parts)

    def transform(self, x: np.ndarray, g: GroupElement) -> np.ndarray:
        """Apply the induced action ``rho(g) f(g^-1 x)`` to ``(B, C, H, W)`` or ``(B, C)`` arrays."""
        x = np.asarray(x)
        if x.shape[1] != self.total_channels:
            raise GroupError(f"expected {self.total_channels} channels, got {x.shape[1]}")
        y = transform_image(x, g) if x.ndim == 4 else x
        m = self.rep_matrix(g)
        return np.einsum("oc,bc...->bo...", m, y)


def transform_image(x: np.ndarray, g: GroupElement) -> np.ndarray:
    """Spatial action on the last two axes (square grids, exact elements only)."""
    k = g.quarter_turns
    if k is None:
        raise GroupError(f"{g} does not act exactly on the pixel grid")
    if x.shape[-1] != x.shape[-2] and k % 2:
        raise GroupError("quarter turns need a square grid")
    y = np.flip(x, axis=-1) if g.reflect else x
    return np.ascontiguousarray(np.rot90(y, k, axes=(-2, -1)))


def _subgroup(group: GroupSpec) -> GroupSpec:
    if group.kind == "so2":
        return group
    n = group.rotation_order
    if n % 2:
        raise OddRotationOrder(f"cannot halve the rotation order of {group.name}")
    return GroupSpec(group.kind, n // 2)


def restrict(ft: FieldType) -> tuple[FieldType, np.ndarray]:
    """Restrict to the index-2 rotation subgroup (C_N -> C_N/2, D_N -> D_N/2).

    For SO(2) the restricted type keeps only the invariant (frequency-0)
    components.  Returns ``(restricted_type, B)`` with orthonormal columns such
    that ``rho_restricted(h) == B.T @ rho(h) @ B`` for every subgroup element.
    New coordinates are obtained as ``B.T @ old``.
    """
    sub = _subgroup(ft.group)
    blocks, new_fields = [], []
    for r in ft.representations():
        b, fields = _restrict_rep(r, sub)
        blocks.append(b)
        new_fields.extend(fields)
    return FieldType(sub, tuple(new_fields)), _block_diag(blocks)


@lru_cache(maxsize=None)
def _restrict_rep_cached(rep: Representation, sub: GroupSpec):
    if rep.kind == "trivial" or rep.is_trivial and rep.kind != "regular":
        return np.ones((1, 1)), ((trivial(sub), 1),)
    if rep.group.kind == "so2":
        # non-trivial irreps have no invariant component
        return np.zeros((rep.dimension, 0)), ()
    if rep.kind == "irrep":
        raise GroupError("restriction of cyclic irreps is not supported")
    g = rep.group
    # left cosets structure of the regular representation: right cosets H x
    h_elems = [sub.element(i) for i in range(sub.order)]
    reps: list[GroupElement] = []
    coset_of: dict[int, tuple[int, int]] = {}
    for i in range(g.order):
        x = g.element(i)
        if i in coset_of:
            continue
        c = len(reps)
        reps.append(x)
        for j, h in enumerate(h_elems):
            coset_of[g.index(h * x)] = (c, j)
    n_sub = sub.order
    b = np.zeros((g.order, g.order))
    for old, (c, j) in coset_of.items():
        b[old, c * n_sub + j] = 1.0
    return b, ((regular(sub), len(reps)),)


def _restrict_rep(rep: Representation, sub: GroupSpec):
    b, fields = _restrict_rep_cached(rep, sub)
    return b.copy(), list(fields)


def split_bundles(ft: FieldType) -> list[list[Representation]]:
    """Split an SO(2) field type into bundles that each start at frequency 0."""
    bundles: list[list[Representation]] = []
    for r in ft.representations():
        if r.kind != "irrep" or r.group.kind != "so2":
            raise GroupError("bundles are defined for SO(2) irrep field types only")
        if r.frequency == 0 or not bundles:
            bundles.append([r])
        else:
            bundles[-1].append(r)
    return bundles


def group_fourier_pair(ft: FieldType, num_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Sampled inverse/forward Fourier transforms of one band-limited SO(2) signal.

    ``inverse`` has shape ``(num_samples, C)`` and maps irrep coefficients to
    the values of ``f(theta) = sum_k <(cos k theta, sin k theta), v_k>`` at
    ``theta_j = 2 pi j / num_samples``; columns are orthonormal so
    ``forward = inverse.T``.
    """
    if ft.group.kind != "so2":
        raise GroupError("group_fourier_pair needs an SO(2) field type")
    fmax = max(r.frequency for r in ft.representations())
    if num_samples < 2 * fmax + 1:
        raise Undersampled(f"{num_samples} samples cannot resolve frequency {fmax}")
    theta = TWO_PI * np.arange(num_samples) / num_samples
    cols = []
    for r in ft.representations():
        if r.frequency == 0:
            cols.append(np.ones(num_samples))
        else:
            cols.append(math.sqrt(2.0) * np.cos(r.frequency * theta))
            cols.append(math.sqrt(2.0) * np.sin(r.frequency * theta))
    inverse = np.stack(cols, axis=1) / math.sqrt(num_samples)
    return inverse.T.copy(), inverse


def iter_exact_pairs(group: GroupSpec) -> Iterator[tuple[GroupElement, GroupElement]]:
    els = group.exact_elements()
    for a in els:
        for b in els:
            yield a, b
