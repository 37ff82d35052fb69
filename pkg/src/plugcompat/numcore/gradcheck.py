"""Parameter-slot graphs and the central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from plugcompat.errors import ContractError
from plugcompat.numcore.tensor import Tensor


@dataclass
class DiffGraph:
    """A scalar-valued program over named parameter slots.

    ``forward`` receives a dict of Tensors (trainable slots carry
    ``requires_grad=True``) and must return the output Tensor.
    """

    forward: Callable[[dict], Tensor]
    params: dict
    trainable: set = field(default_factory=set)

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        unknown = set(self.trainable) - set(self.params)
        if unknown:
            raise ContractError(f"trainable slots not in params: {sorted(unknown)}")

    def _bind(self, overrides=None):
        overrides = overrides or {}
        return {
            name: Tensor(overrides.get(name, value), requires_grad=name in self.trainable, name=name)
            for name, value in self.params.items()
        }

    def value(self, overrides=None):
        out = self.forward(self._bind(overrides))
        if out.data.size != 1:
            raise ContractError(f"graph output must be scalar, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    def gradients(self):
        """Return (value, {trainable name: gradient array})."""
        bound = self._bind()
        out = self.forward(bound)
        if out.data.size != 1:
            raise ContractError(f"graph output must be scalar, got shape {out.shape}")
        out.backward()
        grads = {}
        for name in sorted(self.trainable):
            g = bound[name].grad
            grads[name] = np.zeros_like(self.params[name]) if g is None else g
        return float(out.data.reshape(-1)[0]), grads


@dataclass
class GradCheckReport:
    param: str
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    h: float
    checked: int

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def numeric_gradient(graph, param, h=1e-5, indices=None):
    base = graph.params[param]
    flat_idx = range(base.size) if indices is None else indices
    out = np.zeros(base.size)
    for i in flat_idx:
        bumped = base.copy().reshape(-1)
        bumped[i] = base.reshape(-1)[i] + h
        f_plus = graph.value({param: bumped.reshape(base.shape)})
        bumped[i] = base.reshape(-1)[i] - h
        f_minus = graph.value({param: bumped.reshape(base.shape)})
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out.reshape(base.shape)


def finite_diff_check(graph, param, tolerance=1e-6, h=1e-5, analytic=None, indices=None):
    """Compare the analytic gradient of ``param`` with central differences.

    The relative error is the largest elementwise discrepancy divided by the
    largest gradient magnitude (analytic or numeric), which stays meaningful
    for entries whose true gradient is near zero. ``analytic`` overrides the
    graph's own gradient (used for negative controls). ``indices`` restricts
    the check to a subset of flat positions.
    """
    if param not in graph.trainable:
        raise ContractError(f"{param!r} is not a trainable slot")
    if analytic is None:
        _, grads = graph.gradients()
        analytic = grads[param]
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = numeric_gradient(graph, param, h=h, indices=indices)
    if indices is not None:
        mask = np.zeros(analytic.size, dtype=bool)
        mask[list(indices)] = True
        a = analytic.reshape(-1)[mask]
        n = numeric.reshape(-1)[mask]
    else:
        a, n = analytic.reshape(-1), numeric.reshape(-1)
    abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(n))) if n.size else 0.0)
    rel = abs_err / scale if scale > 1e-300 else abs_err
    return GradCheckReport(param, rel, abs_err, tolerance, h, int(a.size))
