"""Flat parameter vectors and the per-layer variance-sphere geometry.

A model's trainable parameters live in one contiguous 1-D array split into
named layer slices.  Every statistic here uses the population (1/n) variance
and accumulates in float64 regardless of the storage dtype; slices whose
variance falls below ``EPS_VAR`` are treated as degenerate by the correction
step.  All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

# Degenerate-variance floor (wide precision). Zero-initialized bias slices sit
# below this and must be skipped by callers, not rescaled.
EPS_VAR = 1e-12

PARAM_KINDS = ("weight", "bias", "norm_scale", "norm_shift")


class LayoutMismatch(ValueError):
    """Raised when two parameter vectors with different layouts are combined."""


class DegenerateVariance(ValueError):
    """Raised when variance correction meets an (almost) constant slice."""


@dataclass(frozen=True)
class SliceInfo:
    """One named layer slice inside the flat parameter array."""

    name: str
    offset: int
    length: int
    kind: str


@dataclass(frozen=True)
class LayerStats:
    mean: float
    variance: float
    n: int


@dataclass(frozen=True)
class VarianceTarget:
    """Per-layer target variances captured from a reference mode."""

    targets: Mapping[str, float]
    captured_from: str = ""

    def __contains__(self, name: str) -> bool:
        return name in self.targets

    def __getitem__(self, name: str) -> float:
        return self.targets[name]


class ParamVector:
    """Immutable flat parameter array with a named slice layout.

    The constructor takes ownership of ``data`` and marks it read-only;
    callers that keep a writable reference must pass a copy.
    """

    __slots__ = ("data", "layout", "_index")

    def __init__(self, data: np.ndarray, layout: Sequence[SliceInfo]):
        data = np.asarray(data)
        if data.ndim != 1:
            raise ValueError("parameter data must be 1-D")
        if not np.issubdtype(data.dtype, np.floating):
            raise ValueError("parameter data must be floating point")
        layout = tuple(layout)
        _validate_layout(layout, data.shape[0])
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "_index", {s.name: s for s in layout})

    def __setattr__(self, name, value):  # pragma: no cover - defensive
        raise AttributeError("ParamVector is immutable")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.layout)

    def info(self, name: str) -> SliceInfo:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no layer slice named {name!r}") from None

    def get(self, name: str) -> np.ndarray:
        """Read-only view of one layer slice."""
        s = self.info(name)
        return self.data[s.offset : s.offset + s.length]

    def copy_data(self) -> np.ndarray:
        return self.data.copy()

    def layout_compatible(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def require_compatible(self, other: "ParamVector") -> None:
        if not self.layout_compatible(other):
            raise LayoutMismatch("parameter layouts differ")

    def with_slices(self, updates: Mapping[str, np.ndarray]) -> "ParamVector":
        """New vector with the given slices replaced."""
        data = self.data.copy()
        for name, values in updates.items():
            s = self.info(name)
            values = np.asarray(values, dtype=self.dtype).reshape(-1)
            if values.shape[0] != s.length:
                raise ValueError(
                    f"slice {name!r} expects {s.length} values, got {values.shape[0]}"
                )
            data[s.offset : s.offset + s.length] = values
        return ParamVector(data, self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.data.astype(dtype), self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"ParamVector(D={self.size}, slices={len(self.layout)})"


def _validate_layout(layout: Sequence[SliceInfo], total: int) -> None:
    if not layout:
        raise ValueError("layout must contain at least one slice")
    expected = 0
    seen = set()
    for s in layout:
        if s.kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {s.kind!r}")
        if s.name in seen:
            raise ValueError(f"duplicate slice name {s.name!r}")
        seen.add(s.name)
        if s.offset != expected:
            raise ValueError(
                f"slice {s.name!r} at offset {s.offset}, expected {expected}"
            )
        if s.length < 1:
            raise ValueError(f"slice {s.name!r} has non-positive length")
        expected += s.length
    if expected != total:
        raise ValueError(f"layout covers {expected} scalars, data holds {total}")


def zeros_like(pv: ParamVector) -> ParamVector:
    return ParamVector(np.zeros(pv.size, dtype=pv.dtype), pv.layout)


def layer_stats(values: np.ndarray) -> LayerStats:
    """Population mean/variance of one layer slice, accumulated in float64."""
    values = np.asarray(values).reshape(-1)
    if values.size == 0:
        raise ValueError("empty layer")
    wide = values.astype(np.float64, copy=False)
    mean = float(wide.mean())
    variance = float(np.mean((wide - mean) ** 2))
    return LayerStats(mean=mean, variance=variance, n=values.size)


def variance_correction(values: np.ndarray, v: float) -> np.ndarray:
    """Rescale a layer about its mean so its population variance equals ``v``.

    Returns a new array in the input dtype; the input is untouched.  The mean
    is preserved exactly up to rounding (deviations are re-centered before
    scaling).  Raises ``DegenerateVariance`` when the slice variance is at or
    below ``EPS_VAR`` while a positive target is requested.
    """
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("empty layer")
    if v < 0:
        raise ValueError("target variance must be non-negative")
    wide = values.reshape(-1).astype(np.float64)
    mean = wide.mean()
    dev = wide - mean
    dev -= dev.mean()  # second-pass centering keeps the mean bit-stable
    var = float(np.mean(dev * dev))
    if v == 0.0:
        out = np.full_like(wide, mean)
        return out.astype(values.dtype).reshape(values.shape)
    if var <= EPS_VAR:
        raise DegenerateVariance("degenerate variance")
    scale = np.sqrt(v / var)
    out = mean + scale * dev
    return out.astype(values.dtype).reshape(values.shape)


def l2_distance(
    a: ParamVector, b: ParamVector, layers: Iterable[str]
) -> dict[str, float]:
    """Per-layer Euclidean distance between two layout-compatible vectors."""
    a.require_compatible(b)
    names = list(layers)
    if not names:
        raise ValueError("layers must be non-empty")
    out = {}
    for name in names:
        da = a.get(name).astype(np.float64, copy=False)
        db = b.get(name).astype(np.float64, copy=False)
        out[name] = float(np.linalg.norm(da - db))
    return out


def radial_norm_sq(values: np.ndarray) -> float:
    """Squared distance from the origin: sum of squared entries in float64."""
    wide = np.asarray(values).reshape(-1).astype(np.float64, copy=False)
    return float(wide @ wide)


def arc_length(p0: np.ndarray, d: np.ndarray) -> float:
    """Great-circle length between two layer points about the origin.

    The radius is the mean of the two norms (the endpoints only lie on
    approximately equal spheres); the angle uses the chord-of-unit-vectors
    form, which stays accurate for tiny angles.
    """
    p0 = np.asarray(p0).reshape(-1).astype(np.float64, copy=False)
    d = np.asarray(d).reshape(-1).astype(np.float64, copy=False)
    if p0.shape != d.shape:
        raise ValueError("layer shapes differ")
    n0 = np.linalg.norm(p0)
    n1 = np.linalg.norm(d)
    if n0 == 0.0 or n1 == 0.0:
        raise ValueError("arc undefined at center")
    if np.array_equal(p0, d):
        return 0.0
    u = p0 / n0
    w = d / n1
    half_chord = 0.5 * np.linalg.norm(u - w)
    phi = 2.0 * np.arcsin(min(1.0, half_chord))
    return float(0.5 * (n0 + n1) * phi)
