"""Bases of steerable convolution kernels.

A kernel ``K`` of shape ``(d_out, d_in, k, k)`` is equivariant when
``K(g x) = rho_out(g) K(x) rho_in(g)^-1`` for all group elements ``g`` and
grid offsets ``x``.  Finite groups are solved numerically by averaging over
the group (the Reynolds operator); SO(2) is solved analytically with circular
harmonics on rings of the pixel grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg

from .groups import (
    GroupElement,
    GroupError,
    GroupSpec,
    Representation,
    enumerate_elements,
    rep_matrix,
)

SUPPORTED_SIZES = (1, 3, 5, 7)
_RANK_RTOL = 1e-8


class UnsupportedKernelSize(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyBasis(ValueError):
    """Raised only on request; an empty basis is otherwise a valid result."""


def grid_points(k: int) -> np.ndarray:
    """Plane coordinates ``(x, y)`` of the ``k*k`` kernel taps in row-major order."""
    c = (k - 1) / 2
    rows, cols = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return np.stack([cols.ravel() - c, c - rows.ravel()], axis=1).astype(float)


def steering_matrix(g: GroupElement, k: int) -> np.ndarray:
    """Matrix ``W`` with ``vec(K(g x)) = W @ vec(K)`` on the tap grid.

    Exact elements give a permutation; other rotations use bilinear
    interpolation with zeros outside the grid.
    """
    pts = grid_points(k) @ g.point_matrix().T
    c = (k - 1) / 2
    cols = pts[:, 0] + c
    rows = c - pts[:, 1]
    w = np.zeros((k * k, k * k))
    for p, (r, q) in enumerate(zip(rows, cols)):
        r0, q0 = math.floor(r + 1e-9), math.floor(q + 1e-9)
        fr, fq = r - r0, q - q0
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dq, wq in ((0, 1 - fq), (1, fq)):
                weight = wr * wq
                rr, qq = r0 + dr, q0 + dq
                if abs(weight) < 1e-12 or not (0 <= rr < k and 0 <= qq < k):
                    continue
                w[p, rr * k + qq] += weight
    return w


@dataclass(frozen=True)
class _Harmonic:
    radius: float
    freq_a: int  # frequency of the rotation factor R(freq_a * phi)
    right: str  # 'I', 'J', 'F', 'FJ', or 'col0'/'col1'/'row0'/'row1' variants
    f_in: int
    f_out: int


@dataclass
class KernelBasis:
    basis: np.ndarray  # (n, d_out, d_in, k, k)
    group: GroupSpec
    rep_in: Representation
    rep_out: Representation
    kernel_size: int
    harmonics: tuple = ()
    harmonic_transform: np.ndarray | None = None  # (n, n_harmonics) for SO(2)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def __len__(self) -> int:
        return self.dim

    def gram(self) -> np.ndarray:
        flat = self.basis.reshape(self.dim, -1)
        return flat @ flat.T

    def evaluate(self, coefficients: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Continuous SO(2) kernel values at plane ``points``: ``(d_out, d_in, n_points)``."""
        if self.harmonic_transform is None:
            raise GroupError("continuous evaluation is available for SO(2) bases only")
        w = np.asarray(coefficients) @ self.harmonic_transform
        out = np.zeros((self.rep_out.dimension, self.rep_in.dimension, len(points)))
        for wi, h in zip(w, self.harmonics):
            out += wi * _eval_harmonic(h, points)
        return out


def expand_kernel(basis: KernelBasis, coefficients) -> np.ndarray:
    c = np.asarray(coefficients, dtype=float)
    if c.shape != (basis.dim,):
        raise LengthMismatch(f"expected {basis.dim} coefficients, got shape {c.shape}")
    return np.tensordot(c, basis.basis, axes=1)


def project_onto_basis(basis: KernelBasis, kernel: np.ndarray) -> np.ndarray:
    return basis.basis.reshape(basis.dim, -1) @ np.asarray(kernel).ravel()


def steer_kernel(kernel: np.ndarray, g: GroupElement) -> np.ndarray:
    """Return ``x -> K(g x)`` sampled on the grid."""
    k = kernel.shape[-1]
    w = steering_matrix(g, k)
    flat = kernel.reshape(kernel.shape[:-2] + (k * k,))
    return (flat @ w.T).reshape(kernel.shape)


def kernel_constraint_residual(kernel, group: GroupSpec, rep_in: Representation,
                               rep_out: Representation, elements=None) -> float:
    """Max-abs violation of the steerability constraint over grid-exact elements."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape[:2] != (rep_out.dimension, rep_in.dimension):
        raise GroupError(f"kernel shape {kernel.shape} does not match the representations")
    els = group.exact_elements() if elements is None else elements
    worst = 0.0
    for g in els:
        lhs = steer_kernel(kernel, g)
        rhs = np.einsum("ao,obij,bc->acij", rep_matrix(rep_out, g), kernel,
                        rep_matrix(rep_in, g.inverse()))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) if kernel.size else 0.0)
    return worst


def analytic_residual(basis: KernelBasis, coefficients, angles) -> float:
    """Constraint violation of a continuous SO(2) kernel at arbitrary rotation angles."""
    pts = grid_points(basis.kernel_size)
    k0 = basis.evaluate(coefficients, pts)
    worst = 0.0
    for a in angles:
        g = GroupElement(a)
        kg = basis.evaluate(coefficients, pts @ g.point_matrix().T)
        rhs = np.einsum("ao,obp,bc->acp", rep_matrix(basis.rep_out, g), k0,
                        rep_matrix(basis.rep_in, g.inverse()))
        worst = max(worst, float(np.max(np.abs(kg - rhs))))
    return worst


def _orthonormal_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the row space of ``mat`` and the map producing it."""
    if mat.size == 0 or mat.shape[0] == 0:
        return np.zeros((0, mat.shape[1])), np.zeros((0, mat.shape[0]))
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((0, mat.shape[1])), np.zeros((0, mat.shape[0]))
    r = int(np.sum(s > _RANK_RTOL * s[0]))
    rows = vt[:r]
    transform = (u[:, :r] / s[:r]).T
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(r), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None], transform * signs[:, None]


def _check(rep_in: Representation, rep_out: Representation, group: GroupSpec, k: int):
    if k not in SUPPORTED_SIZES:
        raise UnsupportedKernelSize(f"kernel size {k} not in {SUPPORTED_SIZES}")
    if rep_in.group != group or rep_out.group != group:
        raise GroupError("representations must belong to the given group")


def solve_kernel_basis(rep_in: Representation, rep_out: Representation,
                       group: GroupSpec, kernel_size: int, *, require_nonempty: bool = False) -> KernelBasis:
    _check(rep_in, rep_out, group, kernel_size)
    basis = _solve_cached(rep_in, rep_out, group, kernel_size)
    if require_nonempty and basis.dim == 0:
        raise EmptyBasis(f"no equivariant kernel {rep_in.name} -> {rep_out.name} over {group.name}")
    return basis


@lru_cache(maxsize=None)
def _solve_cached(rep_in, rep_out, group, k) -> KernelBasis:
    if group.is_finite:
        return _solve_finite(rep_in, rep_out, group, k)
    return _solve_so2(rep_in, rep_out, group, k)


def _solve_finite(rep_in, rep_out, group, k) -> KernelBasis:
    els = enumerate_elements(group)
    n = len(els)
    rin = np.stack([rep_matrix(rep_in, g) for g in els])
    rout = np.stack([rep_matrix(rep_out, g) for g in els])
    w = np.stack([steering_matrix(g, k) for g in els])
    d_o, d_i = rep_out.dimension, rep_in.dimension
    # Reynolds operator applied to kernels supported on a slice:
    #   P(K)[o, c, p] = 1/|G| sum_g rho_out(g)[a, o] K[a, b, q] W_g[p, q] rho_in(g)[b, c]
    if rep_out.kind == "regular":
        t = np.einsum("go,gbc,gpq->bqocp", rout[:, 0, :], rin, w, optimize=True) / n
    elif rep_in.kind == "regular":
        t = np.einsum("gao,gc,gpq->aqocp", rout, rin[:, 0, :], w, optimize=True) / n
    else:
        t = np.einsum("gao,gbc,gpq->abqocp", rout, rin, w, optimize=True) / n
    rows = t.reshape(-1, d_o * d_i * k * k)
    basis, _ = _orthonormal_rows(rows)
    return KernelBasis(basis.reshape(-1, d_o, d_i, k, k), group, rep_in, rep_out, k)


def constraint_matrix(rep_in: Representation, rep_out: Representation, group: GroupSpec,
                      kernel_size: int, elements=None) -> np.ndarray:
    """Fully materialised linear constraint; its nullspace is the kernel space.

    Rows stack ``K(g x) - rho_out(g) K(x) rho_in(g)^-1`` for each element.
    """
    k = kernel_size
    d_o, d_i = rep_out.dimension, rep_in.dimension
    els = group.exact_elements() if elements is None else elements
    blocks = []
    for g in els:
        steer = np.kron(np.eye(d_o * d_i), steering_matrix(g, k))
        act = np.kron(np.kron(rep_matrix(rep_out, g), rep_matrix(rep_in, g.inverse()).T), np.eye(k * k))
        blocks.append(steer - act)
    return np.concatenate(blocks, axis=0)


def nullspace_dimension(rep_in, rep_out, group, kernel_size) -> int:
    c = constraint_matrix(rep_in, rep_out, group, kernel_size)
    return scipy.linalg.null_space(c).shape[1]


# --- SO(2) -----------------------------------------------------------------

_J = np.array([[0.0, -1.0], [1.0, 0.0]])
_F = np.array([[1.0, 0.0], [0.0, -1.0]])
_RIGHT = {"I": np.eye(2), "J": _J, "F": _F, "FJ": _F @ _J}


def _rot(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _eval_harmonic(h: _Harmonic, points: np.ndarray) -> np.ndarray:
    r = np.hypot(points[:, 0], points[:, 1])
    on_ring = np.abs(r - h.radius) < 1e-6
    phi = np.arctan2(points[:, 1], points[:, 0])
    n = len(points)
    if h.f_in == 0 and h.f_out == 0:
        vals = np.ones((1, 1, n))
    elif h.f_in == 0:
        m = _rot(h.freq_a * phi)  # (n, 2, 2)
        col = 0 if h.right == "col0" else 1
        vals = m[:, :, col].T[:, None, :]
    elif h.f_out == 0:
        m = _rot(-h.freq_a * phi)
        row = 0 if h.right == "row0" else 1
        vals = m[:, row, :].T[None, :, :]
    else:
        m = _rot(h.freq_a * phi) @ _RIGHT[h.right]
        vals = np.transpose(m, (1, 2, 0))
    return vals * on_ring


def _so2_harmonics(f_in: int, f_out: int, radius: float) -> list[_Harmonic]:
    centre = radius < 1e-9
    if f_in == 0 and f_out == 0:
        return [_Harmonic(radius, 0, "I", 0, 0)]
    if f_in == 0:
        return [] if centre else [_Harmonic(radius, f_out, c, 0, f_out) for c in ("col0", "col1")]
    if f_out == 0:
        return [] if centre else [_Harmonic(radius, f_in, r, f_in, 0) for r in ("row0", "row1")]
    out = []
    d = f_out - f_in
    if not centre or d == 0:
        out += [_Harmonic(radius, d, "I", f_in, f_out), _Harmonic(radius, d, "J", f_in, f_out)]
    if not centre:
        out += [_Harmonic(radius, f_out + f_in, "F", f_in, f_out),
                _Harmonic(radius, f_out + f_in, "FJ", f_in, f_out)]
    return out


def _solve_so2(rep_in, rep_out, group, k) -> KernelBasis:
    if rep_in.kind == "trivial":
        rep_in_f = 0
    else:
        rep_in_f = rep_in.frequency
    rep_out_f = 0 if rep_out.kind == "trivial" else rep_out.frequency
    pts = grid_points(k)
    radii = sorted({round(float(r), 9) for r in np.hypot(pts[:, 0], pts[:, 1])})
    harmonics = [h for r in radii for h in _so2_harmonics(rep_in_f, rep_out_f, r)]
    d_o, d_i = rep_out.dimension, rep_in.dimension
    if not harmonics:
        return KernelBasis(np.zeros((0, d_o, d_i, k, k)), group, rep_in, rep_out, k, (), np.zeros((0, 0)))
    samples = np.stack([_eval_harmonic(h, pts).reshape(-1) for h in harmonics])
    # _eval_harmonic returns (d_o, d_i, n_points) which flattens in (o, i, p) order
    basis, transform = _orthonormal_rows(samples)
    return KernelBasis(basis.reshape(-1, d_o, d_i, k, k), group, rep_in, rep_out, k,
                       tuple(harmonics), transform)
