"""Finite-difference gradient verification harness.

Central differences (h=1e-5, float64) against the reverse-mode gradients,
per differentiable operation, over seeded random instances. Exposed both
to the test suite and to the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = 1e-5
TOL = 1e-4


def numeric_grad(f: Callable[[], float], x: Tensor, indices: Iterable[int] | None = None,
                 h: float = H) -> np.ndarray:
    """Central-difference d f / d x at the current value of ``x``.

    ``f`` re-evaluates the forward pass reading ``x.data``. When ``indices``
    is given, only those flat entries are probed; the rest stay NaN.
    """
    flat = x.data.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(x.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over checked entries of |a-n| / max(|a|, |n|, 1e-6)."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def check_grads(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
                rng: np.random.Generator | None = None,
                samples_per_param: int | None = None) -> float:
    """Compare backward() grads of ``build_loss()`` against central differences.

    ``build_loss`` must be a pure function of the params' current values.
    Returns the worst relative error over all checked entries. When
    ``samples_per_param`` is set, only that many random entries of each
    parameter are probed (full check otherwise).
    """
    T.zero_grads(params)
    loss = build_loss()
    T.backward(loss)

    def f() -> float:
        with T.no_grad():
            return build_loss().item()

    worst = 0.0
    for name in sorted(params):
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        indices = None
        if samples_per_param is not None and p.size > samples_per_param:
            assert rng is not None
            indices = rng.choice(p.size, size=samples_per_param, replace=False)
        numeric = numeric_grad(f, p, indices=indices)
        worst = max(worst, max_rel_err(analytic, numeric))
    T.zero_grads(params)
    return worst


@dataclasses.dataclass
class CaseResult:
    op: str
    seed: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOL


@dataclasses.dataclass
class SuiteResult:
    results: list[CaseResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst_by_op(self) -> dict[str, float]:
        worst: dict[str, float] = {}
        for r in self.results:
            worst[r.op] = max(worst.get(r.op, 0.0), r.max_rel_err)
        return worst


def run_suite(seed: int, cases_per_op: int = 100,
              ops: Sequence[str] | None = None) -> SuiteResult:
    """Run the full per-op gradient suite; see _CASE_BUILDERS for coverage."""
    from . import gradcheck_cases

    selected = gradcheck_cases.CASE_BUILDERS
    if ops is not None:
        unknown = set(ops) - set(selected)
        if unknown:
            raise ValueError(f"unknown gradcheck ops: {sorted(unknown)}")
        selected = {k: v for k, v in selected.items() if k in ops}
    results = []
    for op_name, builder in selected.items():
        for case in range(cases_per_op):
            case_seed = seed * 100_000 + case
            rng = np.random.default_rng(case_seed)
            build_loss, params, samples = builder(rng)
            err = check_grads(build_loss, params, rng=rng, samples_per_param=samples)
            results.append(CaseResult(op_name, case_seed, err))
    return SuiteResult(results)
