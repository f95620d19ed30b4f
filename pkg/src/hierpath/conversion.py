"""Feature-map conversion: mapping D x W x H maps to fixed length-p vectors.

Three converters are provided.  The linear one contracts every axis with a
trainable factor matrix and flattens.  The convolutional one applies a single
trainable convolution and flattens.  The pooling one pools (no trainable
weights) and then applies factor matrices.  The dimension solvers enumerate
all convolution / pooling parameter tuples whose output flattens to exactly p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ScheduleError
from .tensor import Tensor, conv2d, mode_k_product, pool2d

# -- layer schedules ---------------------------------------------------------


@dataclass(frozen=True)
class LayerSchedule:
    """Subsets of CNN layer indices (1-based), one per recurrent step."""

    subsets: tuple  # tuple[tuple[int, ...], ...]

    @property
    def steps(self) -> int:
        return len(self.subsets)

    def layers_used(self) -> list:
        return sorted({s for subset in self.subsets for s in subset})


def validate_schedule(schedule: LayerSchedule, num_layers: int, steps: int):
    """Check nonemptiness, index bounds and the increasing-subset constraint."""
    if schedule.steps != steps:
        raise ScheduleError(
            f"schedule has {schedule.steps} subsets but {steps} steps are required")
    for i, subset in enumerate(schedule.subsets, start=1):
        if not subset:
            raise ScheduleError(f"subset {i} is empty")
        for s in subset:
            if not 1 <= s <= num_layers:
                raise ScheduleError(
                    f"subset {i} references layer {s}, outside 1..{num_layers}")
    for n in range(schedule.steps - 1):
        if max(schedule.subsets[n]) >= min(schedule.subsets[n + 1]):
            raise ScheduleError(
                f"subsets {n + 1} and {n + 2} are not increasing: "
                f"max {max(schedule.subsets[n])} >= min {min(schedule.subsets[n + 1])}")


def default_schedule(num_layers: int, steps: int, reverse: bool = False) -> LayerSchedule:
    """One layer per step, using the deepest `steps` backbone layers.

    With ``reverse`` the same layers are visited deepest-first (the
    coarse-levels-see-high-features reading).  A reversed schedule
    intentionally breaks the increasing constraint, so callers skip
    :func:`validate_schedule` for it.
    """
    if steps > num_layers:
        raise ScheduleError(f"need {steps} layers but backbone has {num_layers}")
    chosen = list(range(num_layers - steps + 1, num_layers + 1))
    if reverse:
        chosen = chosen[::-1]
    return LayerSchedule(tuple((s,) for s in chosen))


# -- converters --------------------------------------------------------------


def _check_factor(u: Tensor, extent: int, axis: int):
    if u.data.ndim != 2 or u.shape[1] != extent:
        raise DimensionError(
            f"factor for axis {axis} must have {extent} columns, got shape {u.shape}")


@dataclass
class LinearConversion:
    """vec(a x1 U1 x2 U2 x3 U3); trainable factor matrices."""

    factors: tuple  # (U1: m x D, U2: n x W, U3: v x H)

    @property
    def target_p(self) -> int:
        return int(np.prod([u.shape[0] for u in self.factors]))

    def apply(self, a: Tensor) -> Tensor:
        if a.data.ndim not in (3, 4):
            raise DimensionError(f"expected a rank-3/4 feature map, got {a.shape}")
        off = a.data.ndim - 3  # leading batch axis, if any
        out = a
        for axis, u in enumerate(self.factors, start=1):
            _check_factor(u, a.shape[off + axis - 1], axis)
            out = mode_k_product(out, u, off + axis)
        return out.reshape(a.shape[0], -1) if off else out.vec()

    def parameters(self) -> dict:
        return {f"factor{i + 1}": u for i, u in enumerate(self.factors)}


@dataclass
class ConvConversion:
    """vec(Conv(a)); one trainable convolution sized to land on p."""

    weight: Tensor  # K x D x F x F
    stride: int
    zero_pad: int
    target_p: int

    def apply(self, a: Tensor) -> Tensor:
        out = conv2d(a, self.weight, stride=self.stride, zero_pad=self.zero_pad)
        out = out.reshape(a.shape[0], -1) if a.data.ndim == 4 else out.vec()
        if out.shape[-1] != self.target_p:
            raise DimensionError(
                f"convolutional conversion produced {out.shape[-1]} values, "
                f"expected {self.target_p}; check the solver case for shape {a.shape}")
        return out

    def parameters(self) -> dict:
        return {"weight": self.weight}


@dataclass
class PoolConversion:
    """vec(Pool(a) x1 U1 x2 U2 x3 U3); only the factors are trainable."""

    window: int
    stride: int
    factors: tuple
    kind: str = "avg"

    @property
    def target_p(self) -> int:
        return int(np.prod([u.shape[0] for u in self.factors]))

    def apply(self, a: Tensor) -> Tensor:
        pooled = pool2d(a, self.window, self.stride, kind=self.kind)
        off = a.data.ndim - 3
        out = pooled
        for axis, u in enumerate(self.factors, start=1):
            _check_factor(u, pooled.shape[off + axis - 1], axis)
            out = mode_k_product(out, u, off + axis)
        return out.reshape(a.shape[0], -1) if off else out.vec()

    def parameters(self) -> dict:
        return {f"factor{i + 1}": u for i, u in enumerate(self.factors)}


def aggregate_step(vectors) -> Tensor:
    """Arithmetic mean of the converted vectors of one schedule subset."""
    vectors = list(vectors)
    if not vectors:
        raise ScheduleError("cannot aggregate an empty subset")
    sizes = {v.shape[-1] for v in vectors}
    if len(sizes) != 1:
        raise DimensionError(f"converted vectors disagree in length: {sorted(sizes)}")
    total = vectors[0]
    for v in vectors[1:]:
        total = total + v
    return total * (1.0 / len(vectors))


# -- dimension solvers -------------------------------------------------------


@dataclass(frozen=True)
class ConvDimOption:
    filter_size: int
    num_filters: int
    stride: int
    zero_pad: int
    case: int

    def as_dict(self) -> dict:
        return {"F": self.filter_size, "K": self.num_filters, "G": self.stride,
                "Z": self.zero_pad, "case": self.case}


@dataclass(frozen=True)
class PoolDimOption:
    window: int
    stride: int
    case: int

    def as_dict(self) -> dict:
        return {"F": self.window, "G": self.stride, "case": self.case}


def conv_output_size(depth, width, f, k, g, z):
    """Flattened size of a conv output, or None when extents are non-integral."""
    if (width - f + 2 * z) < 0 or (width - f + 2 * z) % g != 0:
        return None
    side = (width - f + 2 * z) // g + 1
    return k * side * side


def pool_output_size(depth, width, f, g):
    if f > width or (width - f) % g != 0:
        return None
    side = (width - f) // g + 1
    return depth * side * side


def solve_conv_dims(depth: int, width: int, height: int, p: int) -> list:
    """All (F, K, G, Z) whose convolution flattens a square map to length p.

    Case 1: F = W (global filter), Z = 0, K = p, any stride.
    Case 2: F = G < W (disjoint), with zero padding keeping (W+2Z)/F integral.
    Case 3: G = 1, Z = 0.
    Case 4: 1 < G < F with padding keeping the output side integral.
    """
    if width != height:
        raise DimensionError(f"square feature maps required, got {width}x{height}")
    options = []
    # case 1: the output side is 1 for any stride dividing zero
    for g in range(1, width + 1):
        options.append(ConvDimOption(width, p, g, 0, 1))
    for f in range(1, width):
        # case 2: F = G
        g = f
        for z in range(0, f):
            if (width + 2 * z) % f != 0:
                continue
            q = ((width + 2 * z) // f) ** 2
            if p % q == 0:
                options.append(ConvDimOption(f, p // q, g, z, 2))
        # case 3: G = 1, Z = 0 (F != G, so F > 1)
        if f > 1:
            q = (width - f + 1) ** 2
            if p % q == 0:
                options.append(ConvDimOption(f, p // q, 1, 0, 3))
        # case 4: 1 < G < F
        for g in range(2, f):
            for z in range(0, f):
                if (width - f + 2 * z) % g != 0:
                    continue
                q = ((width - f + 2 * z) // g + 1) ** 2
                if p % q == 0:
                    options.append(ConvDimOption(f, p // q, g, z, 4))
    options.sort(key=lambda o: (o.filter_size, o.stride, o.zero_pad, o.num_filters, o.case))
    return options


def solve_pool_dims(depth: int, width: int, height: int, p: int) -> list:
    """All (F, G) whose disjoint or strided pooling flattens the map to length p.

    Case 1 (disjoint, F = G): F = W * sqrt(D / p) when that is a positive
    integer dividing W.  Case 2 (F != G): bounded enumeration.
    """
    if width != height:
        raise DimensionError(f"square feature maps required, got {width}x{height}")
    options = []
    ratio = width * math.sqrt(depth / p)
    f = round(ratio)
    if f >= 1 and abs(ratio - f) < 1e-9 and width % f == 0:
        if pool_output_size(depth, width, f, f) == p:
            options.append(PoolDimOption(f, f, 1))
    for f in range(1, width):
        for g in range(2, f):
            if pool_output_size(depth, width, f, g) == p:
                options.append(PoolDimOption(f, g, 2))
    options.sort(key=lambda o: (o.window, o.stride, o.case))
    return options


# -- default factor shapes ---------------------------------------------------


def split_factor_dims(shape, p: int) -> tuple:
    """Pick (m, n, v) with m*n*v == p for a map of the given (D, W, H) shape.

    m is the largest divisor of p not exceeding D, and n*v splits p/m as
    evenly as the divisors of p/m allow.
    """
    d = shape[0]
    m = max(k for k in range(1, min(d, p) + 1) if p % k == 0)
    rest = p // m
    n = max(k for k in range(1, int(math.isqrt(rest)) + 1) if rest % k == 0)
    return m, n, rest // n
