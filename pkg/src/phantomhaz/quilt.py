"""Additive multi-index parameter decomposition with shrinkage priors.

A "quilted" parameter assigns a value to every cell of a categorical lattice
by summing interaction terms: a zero-order term shared by all cells, first
order terms per axis level, second order terms per axis-pair level
combination, and so on up to a maximum order. Gaussian prior variances are
weighted by the contingency-table count of each slice relative to the total
dataset size, shrinking sparsely observed interactions toward the pooled
lower-order terms. A regularized horseshoe prior is available for
sparsity-inducing shrinkage of designated leading-order regression terms.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "WILDCARD",
    "Axis",
    "Lattice",
    "HorseshoeSpec",
    "PriorSpec",
    "ParamDecomposition",
    "prior_scale",
    "horseshoe_logprior",
    "horseshoe_joint_logprior",
    "softplus",
]

WILDCARD = "*"
VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class Axis:
    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError(f"axis {self.name!r} needs at least one level")
        if WILDCARD in self.levels:
            raise ValueError(f"axis {self.name!r} uses the reserved level {WILDCARD!r}")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"axis {self.name!r} has duplicate levels")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))

    @property
    def size(self) -> int:
        return len(self.levels)


class Lattice:
    """Named categorical axes plus the multi-way contingency counts of a dataset."""

    def __init__(self, axes: Sequence[Axis], cell_counts=None, total_n=None):
        self.axes = tuple(axes)
        if len({a.name for a in self.axes}) != len(self.axes):
            raise ValueError("duplicate axis names")
        self.shape = tuple(a.size for a in self.axes)
        if cell_counts is None:
            cell_counts = np.zeros(self.shape)
        counts = np.asarray(cell_counts, dtype=float).reshape(self.shape)
        if np.any(counts < 0):
            raise ValueError("cell counts must be nonnegative")
        self.cell_counts = counts
        self.total_n = float(counts.sum()) if total_n is None else float(total_n)
        if self.total_n and abs(counts.sum() - self.total_n) > 1e-6:
            raise ValueError("cell counts must sum to total_n")
        self._level_index = [
            {lvl: i for i, lvl in enumerate(a.levels)} for a in self.axes
        ]

    @classmethod
    def from_assignments(cls, axes: Sequence[Axis], kappas) -> "Lattice":
        """Build the contingency table from per-record level-name tuples."""
        lat = cls(axes)
        counts = np.zeros(lat.shape)
        for kappa in kappas:
            counts[lat.indices_of(kappa)] += 1
        return cls(axes, counts)

    @property
    def n_axes(self) -> int:
        return len(self.axes)

    def axis_index(self, name: str) -> int:
        for i, a in enumerate(self.axes):
            if a.name == name:
                return i
        raise KeyError(f"no axis named {name!r}")

    def indices_of(self, kappa: Sequence[str]) -> tuple[int, ...]:
        if len(kappa) != self.n_axes:
            raise ValueError(f"expected {self.n_axes} coordinates, got {len(kappa)}")
        try:
            return tuple(self._level_index[d][str(k)] for d, k in enumerate(kappa))
        except KeyError as err:
            raise KeyError(f"unknown level {err.args[0]!r}") from None

    def levels_of(self, idx: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.axes[d].levels[i] for d, i in enumerate(idx))

    def marginal_counts(self, subset: tuple[int, ...]) -> np.ndarray:
        """Contingency counts summed over the axes not in ``subset``."""
        other = tuple(d for d in range(self.n_axes) if d not in subset)
        return self.cell_counts.sum(axis=other) if other else self.cell_counts


@dataclass(frozen=True)
class HorseshoeSpec:
    global_scale: float = 0.1
    slab_scale: float = 1.0

    def __post_init__(self):
        if self.global_scale <= 0 or self.slab_scale <= 0:
            raise ValueError("horseshoe scales must be positive")


@dataclass(frozen=True)
class PriorSpec:
    base_variance: float = 1.0
    horseshoe: HorseshoeSpec | None = None

    def __post_init__(self):
        if self.base_variance <= 0:
            raise ValueError("base_variance must be positive")


class ParamDecomposition:
    """One quilted parameter: a sum of interaction-term tensors over a lattice.

    ``terms`` maps an axis-index subset (a sorted tuple, ``()`` for the zero
    order term) to an array of shape (subset level sizes) + value_shape. The
    resolved value at multi-index kappa is the sum of the zero-order term and
    every stored term sliced at kappa's coordinates.
    """

    def __init__(self, lattice: Lattice, max_order: int, value_shape=(),
                 terms: dict | None = None):
        if max_order < 0:
            raise ValueError("max_order must be nonnegative")
        self.lattice = lattice
        self.max_order = int(max_order)
        self.value_shape = tuple(int(s) for s in value_shape)
        if terms is None:
            terms = {
                subset: np.zeros(self._term_shape(subset))
                for subset in self._default_subsets()
            }
        self.terms = {}
        for subset, arr in terms.items():
            subset = tuple(int(d) for d in subset)
            if len(subset) > self.max_order:
                raise ValueError(f"term {subset} exceeds max_order {self.max_order}")
            if tuple(sorted(set(subset))) != subset:
                raise ValueError(f"term key {subset} must be a sorted unique tuple")
            arr = np.asarray(arr, dtype=float).reshape(self._term_shape(subset))
            self.terms[subset] = arr
        self.terms = dict(sorted(self.terms.items(), key=lambda kv: (len(kv[0]), kv[0])))

    def _default_subsets(self):
        axes = range(self.lattice.n_axes)
        out = []
        for order in range(0, min(self.max_order, self.lattice.n_axes) + 1):
            out.extend(itertools.combinations(axes, order))
        return out

    def _term_shape(self, subset) -> tuple[int, ...]:
        return tuple(self.lattice.shape[d] for d in subset) + self.value_shape

    def subsets(self) -> list[tuple[int, ...]]:
        return list(self.terms.keys())

    def n_cells(self, subset) -> int:
        out = 1
        for d in subset:
            out *= self.lattice.shape[d]
        return out

    def flat_term(self, subset) -> np.ndarray:
        """Term array reshaped to (n_cells,) + value_shape (a view)."""
        return self.terms[subset].reshape((self.n_cells(subset),) + self.value_shape)

    def copy(self) -> "ParamDecomposition":
        return ParamDecomposition(
            self.lattice,
            self.max_order,
            self.value_shape,
            {k: v.copy() for k, v in self.terms.items()},
        )

    def canonicalized(self, weights: np.ndarray | None = None) -> "ParamDecomposition":
        """Equivalent decomposition with count-weighted-mean-zero interactions.

        The additive decomposition has gauge freedom: shifting mass between a
        term and its lower-order parents leaves every resolved value
        unchanged, so individual terms are only identified under a centering
        convention. This returns the representative in which every term of
        order >= 1 has zero weighted mean along each of its axes (weights
        default to the lattice's marginal count shares), pushing the displaced
        mass down into lower-order terms. Resolved lookups are preserved
        exactly.
        """
        if weights is None:
            if self.lattice.cell_counts.sum() == 0:
                w_axes = [np.full(s, 1.0 / s) for s in self.lattice.shape]
            else:
                w_axes = [
                    self.lattice.marginal_counts((d,)) / self.lattice.cell_counts.sum()
                    for d in range(self.lattice.n_axes)
                ]
        else:
            w_axes = [np.asarray(w, dtype=float) for w in weights]
            w_axes = [w / w.sum() for w in w_axes]
        out = self.copy()
        for subset in sorted(out.terms, key=len, reverse=True):
            if not subset:
                continue
            arr = out.terms[subset]
            for pos, axis in enumerate(subset):
                w = w_axes[axis].reshape(
                    (1,) * pos
                    + (-1,)
                    + (1,) * (len(subset) - pos - 1 + len(self.value_shape))
                )
                mean = (arr * w).sum(axis=pos, keepdims=True)
                arr -= mean
                parent = tuple(a for a in subset if a != axis)
                target = out.terms[parent]
                target += mean.reshape(target.shape)
        return out

    def __add__(self, other: "ParamDecomposition") -> "ParamDecomposition":
        if other.subsets() != self.subsets() or other.value_shape != self.value_shape:
            raise ValueError("decompositions are not conformable")
        return ParamDecomposition(
            self.lattice,
            self.max_order,
            self.value_shape,
            {k: self.terms[k] + other.terms[k] for k in self.terms},
        )

    def lookup(self, kappa: Sequence) -> np.ndarray | float:
        """Resolved value at multi-index kappa (level names or integer indices)."""
        idx = self._as_indices(kappa)
        out = np.zeros(self.value_shape)
        for subset, arr in self.terms.items():
            out = out + arr[tuple(idx[d] for d in subset)]
        return float(out) if self.value_shape == () else out

    def lookup_batch(self, kappa_idx: np.ndarray) -> np.ndarray:
        """Vectorized lookup for an (N, n_axes) integer index matrix."""
        kappa_idx = np.asarray(kappa_idx, dtype=np.intp)
        self._check_bounds(kappa_idx)
        n = kappa_idx.shape[0]
        out = np.zeros((n,) + self.value_shape)
        for subset in self.terms:
            if subset == ():
                out += self.terms[subset][None]
            else:
                out += self.flat_term(subset)[self.term_cell_index(subset, kappa_idx)]
        return out

    def term_cell_index(self, subset, kappa_idx: np.ndarray) -> np.ndarray:
        """Row-major flat index into a term's level grid for each record."""
        if subset == ():
            return np.zeros(len(kappa_idx), dtype=np.intp)
        dims = tuple(self.lattice.shape[d] for d in subset)
        coords = tuple(kappa_idx[:, d] for d in subset)
        return np.ravel_multi_index(coords, dims)

    def prior_variances(self, subset, prior: PriorSpec) -> np.ndarray:
        """Per-slice Gaussian prior variance for one term, floored at 1e-8.

        The variance of a slice is base_variance times the marginal
        contingency count of that slice divided by the dataset size; the
        zero-order slice spans the whole table so its variance is exactly
        base_variance.
        """
        if subset == ():
            return np.asarray(prior.base_variance)
        counts = self.lattice.marginal_counts(tuple(subset))
        total = max(self.lattice.total_n, 1.0)
        return np.maximum(prior.base_variance * counts / total, VARIANCE_FLOOR)

    def n_values(self) -> int:
        return int(sum(arr.size for arr in self.terms.values()))

    def _as_indices(self, kappa) -> tuple[int, ...]:
        if all(isinstance(k, (int, np.integer)) for k in kappa):
            idx = tuple(int(k) for k in kappa)
            self._check_bounds(np.asarray([idx]))
            return idx
        return self.lattice.indices_of(kappa)

    def _check_bounds(self, kappa_idx: np.ndarray):
        shape = np.asarray(self.lattice.shape)
        if kappa_idx.ndim != 2 or kappa_idx.shape[1] != self.lattice.n_axes:
            raise ValueError("kappa index matrix must be (N, n_axes)")
        if np.any(kappa_idx < 0) or np.any(kappa_idx >= shape[None, :]):
            raise IndexError("multi-index out of lattice bounds")

    # -- JSON wire format ---------------------------------------------------

    def to_json_dict(self) -> dict:
        """Serialize: term keys are level-name tuples with wildcards elsewhere."""
        entries = []
        for subset, arr in self.terms.items():
            dims = tuple(self.lattice.shape[d] for d in subset)
            flat = self.flat_term(subset)
            for cell in range(flat.shape[0]):
                levels = np.unravel_index(cell, dims) if subset else ()
                key = [WILDCARD] * self.lattice.n_axes
                for d, lvl in zip(subset, levels):
                    key[d] = self.lattice.axes[d].levels[int(lvl)]
                entries.append(
                    {"key": key, "values": flat[cell].ravel().tolist()}
                )
        return {
            "axes": [
                {"name": a.name, "levels": list(a.levels)} for a in self.lattice.axes
            ],
            "cell_counts": self.lattice.cell_counts.ravel().tolist(),
            "total_n": self.lattice.total_n,
            "max_order": self.max_order,
            "value_shape": list(self.value_shape),
            "terms": entries,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ParamDecomposition":
        axes = [Axis(a["name"], tuple(a["levels"])) for a in obj["axes"]]
        lattice = Lattice(axes, np.asarray(obj["cell_counts"], dtype=float))
        value_shape = tuple(obj.get("value_shape", []))
        dec = cls(lattice, int(obj["max_order"]), value_shape)
        for entry in obj["terms"]:
            key = entry["key"]
            subset = tuple(d for d, k in enumerate(key) if k != WILDCARD)
            levels = tuple(
                lattice._level_index[d][key[d]] for d in subset
            )
            vals = np.asarray(entry["values"], dtype=float).reshape(value_shape)
            dec.terms[subset][levels] = vals
        return dec

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_json_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ParamDecomposition":
        return cls.from_json_dict(json.loads(text))


def prior_scale(dec: ParamDecomposition, subset, levels, prior: PriorSpec) -> float:
    """Gaussian prior variance of one term slice.

    ``subset`` names the participating axes (indices or axis names) and
    ``levels`` the level assignment within it (indices or level names).
    """
    subset = tuple(
        d if isinstance(d, (int, np.integer)) else dec.lattice.axis_index(d)
        for d in subset
    )
    arr = dec.prior_variances(subset, prior)
    if subset == ():
        return float(arr)
    idx = tuple(
        lvl
        if isinstance(lvl, (int, np.integer))
        else dec.lattice._level_index[d][lvl]
        for d, lvl in zip(subset, levels)
    )
    return float(arr[idx])


# -- regularized horseshoe ----------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def _regularized_variance(lam, global_scale, slab_scale):
    lam2 = np.square(lam)
    g2 = global_scale**2
    c2 = slab_scale**2
    return c2 * g2 * lam2 / (c2 + g2 * lam2)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(240)


def horseshoe_logprior(values, global_scale: float, slab_scale: float) -> float:
    """Log marginal density of the regularized horseshoe, local scales integrated out.

    Each coordinate has prior Normal(0, v(lambda)) with
    v(lambda) = c^2 g^2 lambda^2 / (c^2 + g^2 lambda^2) and a standard
    half-Cauchy local scale lambda. The lambda integral is evaluated by
    Gauss-Legendre quadrature in u = atan(lambda), where the half-Cauchy
    density is uniform on (0, pi/2). The marginal diverges logarithmically at
    exactly 0; evaluate at nonzero values.
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)) or global_scale <= 0 or slab_scale <= 0:
        raise ValueError("values must be finite and scales positive")
    u = 0.25 * np.pi * (_GL_NODES + 1.0)
    w = 0.25 * np.pi * _GL_WEIGHTS
    lam = np.tan(u)
    var = _regularized_variance(lam, global_scale, slab_scale)
    # (n_values, n_nodes) normal densities
    dens = np.exp(-0.5 * np.square(values.ravel())[:, None] / var[None, :]) / np.sqrt(
        2.0 * np.pi * var[None, :]
    )
    marginals = (2.0 / np.pi) * dens @ w
    return float(np.sum(np.log(marginals)))


def horseshoe_joint_logprior(
    values, raw_scales, global_scale: float, slab_scale: float
):
    """Joint log density with explicit local-scale auxiliaries, plus gradients.

    The local scale of each coordinate is softplus(raw) with a half-Cauchy(1)
    prior (including the softplus change-of-variables term), keeping the raw
    auxiliaries unconstrained for optimization. Returns
    (logp, dlogp/dvalues, dlogp/draw_scales).
    """
    v = np.asarray(values, dtype=float)
    a = np.asarray(raw_scales, dtype=float)
    if v.shape != a.shape:
        raise ValueError("values and raw_scales must have matching shapes")
    lam = softplus(a)
    sig = 1.0 / (1.0 + np.exp(-a))  # d softplus / da
    var = _regularized_variance(lam, global_scale, slab_scale)
    g2 = global_scale**2
    c2 = slab_scale**2
    logp = np.sum(
        -0.5 * v**2 / var
        - 0.5 * np.log(2.0 * np.pi * var)
        + np.log(2.0 / np.pi)
        - np.log1p(lam**2)
        + np.log(sig)
    )
    dvar_dlam = 2.0 * c2**2 * g2 * lam / (c2 + g2 * lam**2) ** 2
    dlogp_dlam = (0.5 * v**2 / var**2 - 0.5 / var) * dvar_dlam - 2.0 * lam / (
        1.0 + lam**2
    )
    dlogp_da = dlogp_dlam * sig + (1.0 - sig)
    dlogp_dv = -v / var
    return float(logp), dlogp_dv, dlogp_da
