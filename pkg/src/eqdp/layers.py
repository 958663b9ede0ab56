"""Equivariant layers built on the autodiff engine."""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .groups import (FieldType, GroupError, GroupSpec, Representation, group_fourier_pair, restrict,
                     split_bundles)
from .kernels import solve_kernel_basis

WS_EPS = 1e-5
NORM_EPS = 1e-5


class IrrepFieldType(GroupError):
    """Layer needs permutation (trivial/regular) fields but got irreps."""


class NonIrrepFieldType(GroupError):
    """Layer needs SO(2) irrep fields."""


def _is_permutation(rep: Representation) -> bool:
    return rep.kind in ("trivial", "regular") or rep.is_trivial


def _require_permutation(ft: FieldType, what: str):
    if not all(_is_permutation(r) for r, _ in ft.fields):
        raise IrrepFieldType(f"{what} needs trivial/regular fields, got {ft.describe()}")


def _field_average_matrix(ft: FieldType, mask=None) -> np.ndarray:
    """(C, C) matrix that replaces each channel by the mean over its field."""
    c = ft.total_channels
    m = np.zeros((c, c))
    for i, sl in enumerate(ft.field_slices()):
        if mask is None or mask[i]:
            m[sl, sl] = 1.0 / (sl.stop - sl.start)
    return m


def _field_expand_matrix(ft: FieldType, which=None) -> np.ndarray:
    """(C, F') matrix copying one value per selected field onto its channels."""
    slices = ft.field_slices()
    which = list(range(len(slices))) if which is None else list(which)
    m = np.zeros((ft.total_channels, len(which)))
    for j, i in enumerate(which):
        m[slices[i], j] = 1.0
    return m


class Layer:
    kind = "layer"

    def __init__(self, field_in: FieldType, field_out: FieldType | None = None):
        self.field_in = field_in
        self.field_out = field_in if field_out is None else field_out
        self._params: list[tuple[str, Parameter]] = []

    def register(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=name)
        self._params.append((name, p))
        return p

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self._params]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.field_in.total_channels:
            raise ad.ShapeMismatch(
                f"{self.kind}: expected {self.field_in.total_channels} channels, got {x.shape[1]}")
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def describe(self) -> str:
        return f"{self.kind} {self.field_in.describe()} -> {self.field_out.describe()}"

    def astype(self, dtype):
        for _, p in self._params:
            p.data = p.data.astype(dtype)
        return self


# ------------------------------------------------------------------ kernels

class _ExpandPlan:
    """Which coefficient block fills which (output, input) channel block."""

    def __init__(self, field_in: FieldType, field_out: FieldType, k: int):
        self.k = k
        self.c_out, self.c_in = field_out.total_channels, field_in.total_channels
        self.blocks = []

        def by_rep(ft):
            groups = defaultdict(list)
            for rep, sl in zip(ft.representations(), ft.field_slices()):
                groups[rep].append(np.arange(sl.start, sl.stop))
            return {r: (len(v), np.concatenate(v)) for r, v in groups.items()}

        outs, ins = by_rep(field_out), by_rep(field_in)
        for r_out, (n_o, idx_o) in outs.items():
            for r_in, (n_i, idx_i) in ins.items():
                basis = solve_kernel_basis(r_in, r_out, field_in.group, k)
                if basis.dim == 0:
                    continue
                self.blocks.append((r_out, r_in, n_o, n_i, idx_o, idx_i, basis.basis))
        self.dense = (len(self.blocks) == 1 and len(self.blocks[0][4]) == self.c_out
                      and len(self.blocks[0][5]) == self.c_in
                      and np.all(self.blocks[0][4] == np.arange(self.c_out))
                      and np.all(self.blocks[0][5] == np.arange(self.c_in)))


def expand_coefficients(plan: _ExpandPlan, coefs: list[Tensor], dtype) -> Tensor:
    """Differentiable assembly of the full (C_out, C_in, k, k) kernel."""
    k = plan.k
    bases = [blk[6].astype(dtype, copy=False) for blk in plan.blocks]
    kernel = np.zeros((plan.c_out, plan.c_in, k, k), dtype=dtype)
    pieces = []
    for (_, _, n_o, n_i, idx_o, idx_i, _), c, b in zip(plan.blocks, coefs, bases):
        blk = np.einsum("oin,nabkl->oaibkl", c.data, b, optimize=True).reshape(len(idx_o), len(idx_i), k, k)
        pieces.append(blk)
        if plan.dense:
            kernel = blk
        else:
            kernel[np.ix_(idx_o, idx_i)] = blk

    def backward(g):
        lead = g.shape[:g.ndim - 4]
        grads = []
        for (_, _, n_o, n_i, idx_o, idx_i, basis), b in zip(plan.blocks, bases):
            sub = g if plan.dense else g[..., idx_o, :, :, :][..., idx_i, :, :]
            d_o, d_i = basis.shape[1], basis.shape[2]
            sub = sub.reshape(lead + (n_o, d_o, n_i, d_i, k, k))
            grads.append(np.einsum("...oaibkl,nabkl->...oin", sub, b, optimize=True))
        return tuple(grads)

    return ad._make(kernel, tuple(coefs), backward, "expand_kernel")


def _ws_plan(field_out: FieldType, field_in: FieldType | None, c_in: int):
    out_perm = np.array([_is_permutation(r) for r in field_out.representations()])
    if field_in is None:
        in_mask = np.ones(c_in)
    else:
        in_mask = np.zeros(c_in)
        for r, sl in zip(field_in.representations(), field_in.field_slices()):
            in_mask[sl] = 1.0 if _is_permutation(r) else 0.0
    center = _field_average_matrix(field_out, out_perm) if in_mask.any() else None
    return _field_average_matrix(field_out), center, in_mask


def weight_standardize(kernel: Tensor, field_out: FieldType, field_in: FieldType | None = None,
                       eps: float = WS_EPS) -> Tensor:
    """Per-output-field kernel standardization.

    Statistics pool over the field's channels, every input channel and all
    taps.  Centering is restricted to entries whose output and input fields
    are permutation representations, since only there a constant kernel is
    itself equivariant; the rescaling is a scalar per field and always safe.
    Accepts an array (returns an array) or a Tensor (differentiable).
    """
    was_array = not isinstance(kernel, Tensor)
    kernel = ad.as_tensor(kernel)
    c_out, c_in, k, _ = kernel.shape
    if c_out != field_out.total_channels:
        raise ad.ShapeMismatch("kernel rows do not match the output field type")
    avg, center, in_mask = _ws_plan(field_out, field_in, c_in)
    dtype = kernel.dtype
    avg, in_mask = avg.astype(dtype), in_mask.astype(dtype)
    n_elig = in_mask.sum() * k * k
    kf = kernel.data.reshape(c_out, c_in, k * k)
    if center is not None:
        center = center.astype(dtype) / n_elig
        mu = center @ np.einsum("oip,i->o", kf, in_mask)
        kc = kf - mu[:, None, None] * in_mask[None, :, None]
    else:
        kc = kf
    var = avg @ np.einsum("oip,oip->o", kc, kc) / (c_in * k * k)
    scale = 1.0 / np.sqrt(var + eps)
    out = kc * scale[:, None, None]

    def backward(g):
        lead = g.shape[:g.ndim - 4]
        gf = g.reshape(lead + (c_out, c_in, k * k))
        # d/dKc of (Kc * s(Kc)) contracted with g
        dot = np.einsum("...oip,oip->...o", gf, kc, optimize=True)
        coef = (dot @ avg.T) * (scale ** 3 / (c_in * k * k))
        gk = gf * scale[:, None, None] - coef[..., :, None, None] * kc
        if center is not None:
            msum = np.einsum("...oip,i->...o", gk, in_mask, optimize=True) @ center.T
            gk -= msum[..., :, None, None] * in_mask[None, :, None]
        return (gk.reshape(g.shape),)

    res = ad._make(out.reshape(c_out, c_in, k, k), (kernel,), backward, "weight_standardize")
    return res.data if was_array else res


def standardized_expansion(plan: _ExpandPlan, coefs: list[Tensor], field_out: FieldType,
                           field_in: FieldType, dtype, eps: float = WS_EPS) -> Tensor:
    """Fused ``weight_standardize(expand(coefs))``.

    Equal to composing the two ops, but the backward pass works in
    coefficient space: per-sample kernel gradients are contracted with the
    basis once, and the standardization correction terms reduce to per-field
    scalars times constant coefficient arrays.
    """
    k = plan.k
    c_out, c_in, p = plan.c_out, plan.c_in, k * k
    avg, center, in_mask = _ws_plan(field_out, field_in, c_in)
    in_mask = in_mask.astype(dtype)
    slices = field_out.field_slices()
    n_f = len(slices)
    agg = np.zeros((n_f, c_out), dtype=dtype)  # channel -> field sums
    for f, sl in enumerate(slices):
        agg[f, sl] = 1.0
    dims = agg.sum(axis=1)
    centered = np.array([_is_permutation(r) for r in field_out.representations()]) & (center is not None)
    n_elig = in_mask.sum() * p
    # output field index of every row of every coefficient block
    field_of_channel = np.repeat(np.arange(n_f), dims.astype(int))
    bases = [blk[6].astype(dtype, copy=False) for blk in plan.blocks]
    rows = [field_of_channel[blk[4]].reshape(blk[2], -1)[:, 0] for blk in plan.blocks]

    base = expand_coefficients(plan, coefs, dtype).data.reshape(c_out, c_in, p)
    mu = np.zeros(n_f, dtype=dtype)
    if center is not None:
        mu = np.where(centered, agg @ (base.sum(-1) @ in_mask) / (dims * n_elig), 0.0)
    mask_full = np.broadcast_to(in_mask[None, :, None], (c_out, c_in, p))
    kc = base - (mu @ agg)[:, None, None] * mask_full
    var = (agg @ np.einsum("oip,oip->o", kc, kc)) / (dims * c_in * p)
    scale = 1.0 / np.sqrt(var + eps)
    out = kc * (scale @ agg)[:, None, None]

    def project(arr, blk, b):
        # E^T restricted to one block: (lead, O, I, P) -> (lead, n_o, n_i, n)
        _, _, n_o, n_i, idx_o, idx_i, basis = blk
        lead = arr.shape[:arr.ndim - 3]
        sub = arr if plan.dense else arr[..., idx_o, :, :][..., idx_i, :]
        sub = sub.reshape(lead + (n_o, basis.shape[1], n_i, basis.shape[2], p))
        return np.einsum("...oaibp,nabp->...oin", sub, b.reshape(b.shape[:3] + (p,)), optimize=True)

    et_kc = [project(kc, blk, b) for blk, b in zip(plan.blocks, bases)]
    et_mask = [project(np.ascontiguousarray(mask_full), blk, b) for blk, b in zip(plan.blocks, bases)]
    thetas = [c.data for c in coefs]

    def backward(g):
        lead = g.shape[:g.ndim - 4]
        gf = g.reshape(lead + (c_out, c_in, p))
        qs = [project(gf, blk, b) for blk, b in zip(plan.blocks, bases)]
        a = (gf.sum(-1) @ in_mask) @ agg.T  # eligible sums per field
        d = -(mu * a)
        for q, th, r in zip(qs, thetas, rows):
            contrib = np.einsum("...oin,oin->...o", q, th)
            d[..., r] += contrib  # rows of one block are distinct fields
        coef_var = d * (scale ** 3 / (dims * c_in * p))
        coef_mu = np.where(centered, scale * a / (dims * n_elig), 0.0)
        grads = []
        for q, ek, em, r in zip(qs, et_kc, et_mask, rows):
            gq = q * scale[r][:, None, None]
            gq -= coef_var[..., r][..., None, None] * ek
            gq -= coef_mu[..., r][..., None, None] * em
            grads.append(gq)
        return tuple(grads)

    return ad._make(out.reshape(c_out, c_in, k, k), tuple(coefs), backward, "standardized_expansion")


class EquivariantConv(Layer):
    kind = "equiv_conv"

    def __init__(self, field_in: FieldType, field_out: FieldType, kernel_size: int = 3,
                 padding_mode: str = "zero", standardize: bool = True, rng=None, dtype=np.float64):
        super().__init__(field_in, field_out)
        if field_in.group != field_out.group:
            raise GroupError("input and output field types live on different groups")
        rng = np.random.default_rng(0) if rng is None else rng
        self.kernel_size = kernel_size
        self.padding_mode = padding_mode
        self.standardize = standardize
        self.plan = _ExpandPlan(field_in, field_out, kernel_size)
        self.coefs = []
        for r_out, r_in, n_o, n_i, _, _, basis in self.plan.blocks:
            std = math.sqrt(2.0 / max(1, n_i * basis.shape[0]))
            value = (rng.standard_normal((n_o, n_i, basis.shape[0])) * std).astype(dtype)
            self.coefs.append(self.register(f"coef[{r_out.name}<-{r_in.name}]", value))

    def kernel(self) -> Tensor:
        dtype = self.coefs[0].dtype if self.coefs else np.float64
        if not self.coefs:
            k = self.kernel_size
            return Tensor(np.zeros((self.field_out.total_channels, self.field_in.total_channels, k, k)))
        if self.standardize:
            return standardized_expansion(self.plan, self.coefs, self.field_out, self.field_in, dtype)
        return expand_coefficients(self.plan, self.coefs, dtype)

    def forward(self, x: Tensor) -> Tensor:
        pad = self.kernel_size // 2
        return ad.conv2d(x, self.kernel(), pad, self.padding_mode if pad else "none")

    @property
    def basis_dims(self) -> list[int]:
        return [b[6].shape[0] for b in self.plan.blocks]


# ----------------------------------------------------------- normalization

def _largest_divisor_at_most(n: int, cap: int) -> int:
    return max(d for d in range(1, min(n, cap) + 1) if n % d == 0)


class EquivariantGroupNorm(Layer):
    """Group norm with statistics per representation slice ``y``.

    The channel axis is split into ``(fields, Y)``; each channel group is
    normalized separately for every ``y``.  Regular representations permute
    the ``y`` slices, which this layer commutes with.
    """

    kind = "equiv_group_norm"

    def __init__(self, field_type: FieldType, num_groups: int | None = None, affine: bool = True,
                 eps: float = NORM_EPS, dtype=np.float64):
        super().__init__(field_type)
        rep = field_type.homogeneous_rep()
        if rep is None or not _is_permutation(rep):
            if rep is not None or any(not _is_permutation(r) for r, _ in field_type.fields):
                raise IrrepFieldType("equivariant group norm needs trivial/regular fields; "
                                     "use iid_instance_norm for irreps")
            raise GroupError("equivariant group norm needs a homogeneous field type")
        self.num_fields = field_type.num_fields
        self.dim = rep.dimension
        if num_groups is None:
            num_groups = _largest_divisor_at_most(self.num_fields, 8)
        if num_groups < 1 or self.num_fields % num_groups:
            raise GroupError(f"{self.num_fields} fields cannot be split into {num_groups} groups")
        self.num_groups = num_groups
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = self.register("weight", np.ones(self.num_fields, dtype=dtype))
            self.bias = self.register("bias", np.zeros(self.num_fields, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        f, d, g = self.num_fields, self.dim, self.num_groups
        v = ad.reshape(x, (b, g, f // g, d, h, w))
        mu = ad.mean(v, axis=(2, 4, 5), keepdims=True)
        xc = ad.sub(v, mu)
        var = ad.mean(ad.mul(xc, xc), axis=(2, 4, 5), keepdims=True)
        out = ad.mul(xc, ad.power(ad.add(var, self.eps), -0.5))
        out = ad.reshape(out, (b, f, d, h, w))
        if self.affine:
            out = ad.add(ad.mul(out, ad.reshape(self.weight, (1, f, 1, 1, 1))),
                         ad.reshape(self.bias, (1, f, 1, 1, 1)))
        return ad.reshape(out, (b, c, h, w))


class IIDInstanceNorm(Layer):
    """Instance norm for irrep fields using group-expected statistics.

    Only frequency-0 components are mean-shifted; each field is divided by
    the root of its spatially averaged energy per component.
    """

    kind = "iid_instance_norm"

    def __init__(self, field_type: FieldType, affine: bool = True, eps: float = NORM_EPS, dtype=np.float64):
        super().__init__(field_type)
        reps = field_type.representations()
        if field_type.group.kind != "so2" or any(r.kind == "regular" for r in reps):
            raise NonIrrepFieldType("i.i.d. instance norm needs SO(2) irrep fields")
        self.eps = eps
        self.affine = affine
        self.trivial_fields = [i for i, r in enumerate(reps) if r.is_trivial]
        self.projector = field_type.haar_projector()
        # centering only touches channels with a non-zero Haar mean
        self.center_mask = np.diag(self.projector).copy().reshape(1, -1, 1, 1)
        self.energy = _field_average_matrix(field_type)
        self.expand_weight = _field_expand_matrix(field_type)
        self.expand_bias = _field_expand_matrix(field_type, self.trivial_fields)
        if affine:
            self.weight = self.register("weight", np.ones(field_type.num_fields, dtype=dtype))
            if self.trivial_fields:
                self.bias = self.register("bias", np.zeros(len(self.trivial_fields), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        b, c, _, _ = x.shape
        mask = self.center_mask.astype(x.dtype)
        mu = ad.mean(x, axis=(2, 3), keepdims=True)
        xc = ad.sub(x, ad.mul(mu, mask))
        lam = ad.apply_matrix(ad.mean(ad.mul(xc, xc), axis=(2, 3)), self.energy, axis=1)
        out = ad.mul(xc, ad.reshape(ad.power(ad.add(lam, self.eps), -0.5), (b, c, 1, 1)))
        if self.affine:
            w = ad.apply_matrix(self.weight, self.expand_weight, axis=0)
            out = ad.mul(out, ad.reshape(w, (1, c, 1, 1)))
            if self.trivial_fields:
                bias = ad.apply_matrix(self.bias, self.expand_bias, axis=0)
                out = ad.add(out, ad.reshape(bias, (1, c, 1, 1)))
        return out


# ------------------------------------------------------------- nonlinearity

class PointwiseActivation(Layer):
    kind = "pointwise_act"

    def __init__(self, field_type: FieldType, activation: str = "mish"):
        super().__init__(field_type)
        _require_permutation(field_type, "pointwise activation")
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def forward(self, x):
        return ad.ACTIVATIONS[self.activation](x)


class FourierActivation(Layer):
    """Apply a pointwise nonlinearity on group samples of each SO(2) bundle."""

    kind = "fourier_act"

    def __init__(self, field_type: FieldType, activation: str = "mish", num_samples: int = 8):
        super().__init__(field_type)
        if field_type.group.kind != "so2":
            raise NonIrrepFieldType("Fourier activation is defined for SO(2) fields")
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.num_samples = num_samples
        inv_blocks, fwd_blocks = [], []
        for bundle in split_bundles(field_type):
            sub = FieldType(field_type.group, tuple((r, 1) for r in bundle))
            fwd, inv = group_fourier_pair(sub, num_samples)
            inv_blocks.append(inv)
            fwd_blocks.append(fwd)
        s, c = num_samples * len(inv_blocks), field_type.total_channels
        self.inverse = np.zeros((s, c))
        self.forward_matrix = np.zeros((c, s))
        i = j = 0
        for inv, fwd in zip(inv_blocks, fwd_blocks):
            self.inverse[i:i + num_samples, j:j + inv.shape[1]] = inv
            self.forward_matrix[j:j + inv.shape[1], i:i + num_samples] = fwd
            i += num_samples
            j += inv.shape[1]

    def forward(self, x):
        z = ad.apply_matrix(x, self.inverse, axis=1)
        z = ad.ACTIVATIONS[self.activation](z)
        return ad.apply_matrix(z, self.forward_matrix, axis=1)


# ----------------------------------------------------------------- pooling

class MaxPool(Layer):
    kind = "max_pool"

    def __init__(self, field_type: FieldType, window: int = 2):
        super().__init__(field_type)
        _require_permutation(field_type, "max pooling")
        self.window = window

    def forward(self, x):
        return ad.max_pool2d(x, self.window)


class AvgPool(Layer):
    kind = "avg_pool"

    def __init__(self, field_type: FieldType, window: int = 2):
        super().__init__(field_type)
        self.window = window

    def forward(self, x):
        return ad.avg_pool2d(x, self.window)


class GroupPool(Layer):
    """Project every field onto its invariant part and keep one channel per field."""

    kind = "group_pool"

    def __init__(self, field_type: FieldType):
        rows, keep = [], 0
        for rep, sl in zip(field_type.representations(), field_type.field_slices()):
            if rep.kind == "regular" or rep.is_trivial:
                row = np.zeros(field_type.total_channels)
                row[sl] = 1.0 / (sl.stop - sl.start)
                rows.append(row)
                keep += 1
        if not rows:
            raise GroupError("field type has no invariant component to pool")
        out = FieldType.of(field_type.group, "trivial", keep)
        super().__init__(field_type, out)
        self.matrix = np.stack(rows)

    def forward(self, x):
        return ad.apply_matrix(x, self.matrix, axis=1)


class Restriction(Layer):
    """Re-express features over the index-2 subgroup (or invariants for SO(2))."""

    kind = "restriction"

    def __init__(self, field_type: FieldType):
        sub, basis = restrict(field_type)
        super().__init__(field_type, sub)
        self.basis = basis

    def forward(self, x):
        return ad.apply_matrix(x, self.basis.T, axis=1)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x):
        return ad.global_avg_pool(x)


class Linear(Layer):
    kind = "linear"

    def __init__(self, field_in: FieldType, num_outputs: int, bias: bool = True, rng=None, dtype=np.float64):
        if not field_in.is_trivial:
            raise GroupError("the classifier head expects invariant features")
        super().__init__(field_in, FieldType.of(field_in.group, "trivial", num_outputs))
        rng = np.random.default_rng(0) if rng is None else rng
        f = field_in.total_channels
        bound = 1.0 / math.sqrt(f)
        self.weight = self.register("weight", rng.uniform(-bound, bound, size=(f, num_outputs)).astype(dtype))
        self.bias = self.register("bias", np.zeros(num_outputs, dtype=dtype)) if bias else None

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)
