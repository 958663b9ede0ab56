"""Equivariant ResNet-9 assembly, parameter counting and equivariance audits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .groups import FieldType, GroupElement, GroupSpec, OddRotationOrder
from .layers import (AvgPool, EquivariantConv, EquivariantGroupNorm, FourierActivation, GlobalAvgPool,
                     GroupPool, IIDInstanceNorm, Layer, Linear, MaxPool, PointwiseActivation, Restriction)

# Reference width triple; chosen so that the D4 model lands on ~256k parameters.
DEFAULT_WIDTHS = (15, 30, 60)


class Residual:
    kind = "residual"

    def __init__(self, layers: list[Layer]):
        for a, b in zip(layers, layers[1:]):
            if a.field_out != b.field_in:
                raise ValueError(f"field types do not chain: {a.describe()} then {b.describe()}")
        if layers[0].field_in != layers[-1].field_out:
            raise ValueError("residual branch must preserve the field type")
        self.layers = layers
        self.field_in = layers[0].field_in
        self.field_out = layers[-1].field_out

    def __call__(self, x: Tensor, record=None) -> Tensor:
        h = x
        for layer in self.layers:
            if record is not None:
                record.append((layer, h.data))
            h = layer(h)
        return ad.add(x, h)

    def describe(self) -> str:
        return "residual[" + "; ".join(layer.describe() for layer in self.layers) + "]"


@dataclass
class ModelSpec:
    """Ordered layer graph; ``body`` yields the equivariant features, ``head`` the logits."""

    group: GroupSpec
    num_classes: int
    body: list = field(default_factory=list)  # (name, Layer | Residual)
    head: list = field(default_factory=list)  # (name, Layer)
    input_size: int | None = None

    def __post_init__(self):
        nodes = self.body + self.head
        for (_, a), (nb, b) in zip(nodes, nodes[1:]):
            if a.field_out != b.field_in:
                raise ValueError(f"layer {nb} expects {b.field_in.describe()}, gets {a.field_out.describe()}")
        if sum(isinstance(n, Linear) for _, n in self.head) != 1:
            raise ValueError("a model needs exactly one classifier head")

    # -- structure
    def layers(self) -> list[tuple[str, Layer]]:
        out = []
        for name, node in self.body + self.head:
            if isinstance(node, Residual):
                out.extend((f"{name}.{i}", layer) for i, layer in enumerate(node.layers))
            else:
                out.append((name, node))
        return out

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(f"{lname}.{pname}", p) for lname, layer in self.layers() for pname, p in layer.named_parameters()]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    @property
    def feature_type(self) -> FieldType:
        return self.body[-1][1].field_out

    @property
    def input_type(self) -> FieldType:
        return self.body[0][1].field_in

    @property
    def dtype(self):
        ps = self.parameters()
        return ps[0].dtype if ps else np.dtype(np.float64)

    def set_padding(self, mode: str):
        for _, layer in self.layers():
            if isinstance(layer, EquivariantConv):
                layer.padding_mode = mode
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def set_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a)
            if a.shape != p.shape:
                raise ValueError(f"{p.name}: shape {a.shape} != {p.shape}")
            p.data = a.astype(p.dtype, copy=True)

    # -- evaluation
    def _input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return ad.batch(np.asarray(x, dtype=self.dtype))

    def features(self, x, record=None) -> Tensor:
        h = self._input(x)
        for _, node in self.body:
            if isinstance(node, Residual):
                h = node(h, record)
            else:
                if record is not None:
                    record.append((node, h.data))
                h = node(h)
        return h

    def forward(self, x, record=None) -> Tensor:
        h = self.features(x, record)
        for _, layer in self.head:
            if record is not None:
                record.append((layer, h.data))
            h = layer(h)
        return h

    __call__ = forward

    def describe(self) -> list[str]:
        lines = []
        for name, node in self.body + self.head:
            lines.append(f"{name}: {node.describe()}")
        return lines


def stage_fields(group: GroupSpec, width: int) -> int:
    """Fields per stage: ``max(1, round(w * sqrt(1.5 n) / n))`` with ``n`` the group order."""
    n = group_size(group)
    if n == 1:
        return max(1, int(width))
    return max(1, int(round(width * math.sqrt(1.5 * n) / n)))


def group_size(group: GroupSpec) -> int:
    # for SO(2) the band-limited bundle dimension stands in for the order
    return group.order if group.is_finite else 2 * group.max_frequency + 1


def _field_type(group: GroupSpec, fields: int) -> FieldType:
    if group.kind == "so2":
        return FieldType.bandlimited(group, fields)
    return FieldType.of(group, "regular", fields)


def build_eq_resnet9(group: GroupSpec | str, reference_widths=DEFAULT_WIDTHS, num_classes: int = 10, *,
                     in_channels: int = 3, kernel_size: int = 3, padding_mode: str = "zero",
                     restrict_last_block: bool = True, activation: str = "mish", num_groups: int | None = None,
                     fourier_samples: int = 8, seed: int = 0, dtype=np.float64) -> ModelSpec:
    """Stem plus three conv/act/norm/pool stages, each followed by a residual block."""
    if isinstance(group, str):
        group = GroupSpec.parse(group)
    widths = tuple(int(w) for w in reference_widths)
    if len(widths) != 3 or min(widths) < 1:
        raise ValueError("reference_widths must be three positive integers")
    trivial_group = group.is_finite and group.order == 1
    if restrict_last_block and not trivial_group and group.is_finite and group.rotation_order % 2:
        raise OddRotationOrder(f"cannot restrict {group.name} to a half-order subgroup")
    rng = np.random.default_rng(seed)

    def conv(fi, fo):
        return EquivariantConv(fi, fo, kernel_size, padding_mode, rng=rng, dtype=dtype)

    def act(ft):
        if ft.group.kind == "so2" and not ft.is_trivial:
            return FourierActivation(ft, activation, fourier_samples)
        return PointwiseActivation(ft, activation)

    def norm(ft):
        if ft.group.kind == "so2":
            return IIDInstanceNorm(ft, dtype=dtype)
        return EquivariantGroupNorm(ft, num_groups=None if num_groups is None else min(num_groups, ft.num_fields),
                                    dtype=dtype)

    def pool(ft):
        return AvgPool(ft) if ft.group.kind == "so2" else MaxPool(ft)

    def block(fi, fo):
        return [conv(fi, fo), act(fo), norm(fo)]

    def residual(ft):
        return Residual(block(ft, ft) + block(ft, ft))

    counts = [stage_fields(group, w) for w in widths]
    types = [_field_type(group, c) for c in counts]
    image = FieldType.of(group, "trivial", in_channels)
    body = []
    for i, layer in enumerate(block(image, types[0])):
        body.append((f"stem.{i}", layer))
    prev = types[0]
    for s, ft in enumerate(types, start=1):
        for i, layer in enumerate(block(prev, ft) + [pool(ft)]):
            body.append((f"stage{s}.{i}", layer))
        if s == 3 and restrict_last_block and not trivial_group:
            r = Restriction(ft)
            body.append((f"stage{s}.restrict", r))
            ft = r.field_out
        body.append((f"stage{s}.res", residual(ft)))
        prev = ft
    gp = GroupPool(prev)
    gap = GlobalAvgPool(gp.field_out)
    head = []
    if group.kind == "so2":
        # instance norm leaves every invariant channel with zero spatial mean,
        # so pooling right after it would discard all input dependence
        head.append(("head_act", PointwiseActivation(prev, activation)))
    head += [("group_pool", gp), ("gap", gap), ("linear", Linear(gap.field_out, num_classes, rng=rng, dtype=dtype))]
    return ModelSpec(group, num_classes, body, head)


def count_parameters(model) -> int:
    if isinstance(model, (Layer,)):
        return int(sum(p.data.size for p in model.parameters()))
    return int(sum(p.data.size for p in model.parameters()))


def calibrate_widths(group: GroupSpec | str = "D4", target: int = 256_000, base=(16, 32, 64), **kw) -> tuple:
    """Smallest uniform rescaling of ``base`` whose model count is closest to ``target``."""
    best = None
    for s in np.arange(0.5, 1.51, 0.01):
        widths = tuple(max(1, int(round(b * s))) for b in base)
        n = count_parameters(build_eq_resnet9(group, widths, **kw))
        if best is None or abs(n - target) < abs(best[1] - target):
            best = (widths, n)
    return best[0]


# --------------------------------------------------------------- auditing

def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def _audit_elements(ft: FieldType, elements):
    group = ft.group
    els = group.exact_elements() if elements is None else [g for g in elements if group.contains(g)]
    return [g for g in els if not (g.rotation_angle == 0 and not g.reflect)]


def layer_equivariance(layer: Layer, x: np.ndarray, elements=None) -> float:
    """Max relative error of ``layer(T_g x)`` against ``T'_g layer(x)``."""
    worst = 0.0
    base = layer(ad.batch(x)).data
    for g in _audit_elements(layer.field_in, elements):
        if not layer.field_out.group.contains(g):
            continue
        moved = layer(ad.batch(layer.field_in.transform(x, g))).data
        worst = max(worst, relative_error(moved, layer.field_out.transform(base, g)))
    return worst


@dataclass
class EquivarianceReport:
    layers: list  # (name, kind, error)
    features: float
    logits: float
    elements: list

    @property
    def worst(self) -> float:
        return max([e for _, _, e in self.layers] + [self.features, self.logits])

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def failing(self, tol: float = 1e-4) -> list:
        return [(n, e) for n, _, e in self.layers if e >= tol]


def check_model_equivariance(model: ModelSpec, x: np.ndarray, elements=None) -> EquivarianceReport:
    """Per-layer and end-to-end transform-and-compare audit.

    Layers are fed the activations a real forward pass produces; the
    end-to-end checks use the elements of the feature group (the subgroup
    when the last block is restricted).
    """
    x = np.asarray(x, dtype=model.dtype)
    record = []
    model.forward(x, record)
    names = {id(layer): name for name, layer in model.layers()}
    rows = []
    for layer, inp in record:
        rows.append((names[id(layer)], layer.kind, layer_equivariance(layer, inp, elements)))
    feat_type = model.feature_type
    els = _audit_elements(feat_type, elements)
    base_f = model.features(x).data
    base_l = model.forward(x).data
    ef = el = 0.0
    for g in els:
        gx = model.input_type.transform(x, g)
        ef = max(ef, relative_error(model.features(gx).data, feat_type.transform(base_f, g)))
        el = max(el, relative_error(model.forward(gx).data, base_l))
    return EquivarianceReport(rows, ef, el, els)


def features_equivariance(model: ModelSpec, x: np.ndarray, elements: list[GroupElement]) -> tuple[float, float]:
    """End-to-end (features error, logits error) over ``elements``."""
    x = np.asarray(x, dtype=model.dtype)
    ft = model.feature_type
    base_f = model.features(x).data
    base_l = model.forward(x).data
    ef = el = 0.0
    for g in elements:
        gx = model.input_type.transform(x, g)
        ef = max(ef, relative_error(model.features(gx).data, ft.transform(base_f, g)))
        el = max(el, relative_error(model.forward(gx).data, base_l))
    return ef, el
