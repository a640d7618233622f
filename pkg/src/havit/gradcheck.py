"""Central finite-difference verification of :func:`havit.tensor.backward`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from havit.errors import ContractError
from havit.tensor import Tensor, backward

DENOMINATOR_FLOOR = 1e-8


@dataclass
class ParamReport:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denom


def gradient_report(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    analytic: Callable[[Mapping[str, Tensor]], Tensor] | None = None,
) -> list[ParamReport]:
    """Compare analytic and central-difference gradients parameter by parameter.

    ``f`` maps a name->tensor mapping to a scalar loss and must be
    deterministic; it is evaluated twice on the unperturbed parameters and a
    mismatch raises :class:`ContractError`. ``max_elements`` caps how many
    entries per parameter are perturbed (chosen with a seeded generator).

    ``analytic``, when given, is differentiated instead of ``f``; it must
    agree with ``f`` at the unperturbed point. This lets a surrogate with
    deliberately cut gradient paths be checked against a function that
    holds the cut quantities constant.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}
    base = f(params)
    again = f({k: Tensor(v.data, requires_grad=True) for k, v in params.items()})
    if base.data.tobytes() != again.data.tobytes():
        raise ContractError("finite_difference_check: f is not deterministic for fixed parameters")
    loss = base if analytic is None else analytic(params)
    if analytic is not None and abs(loss.item() - base.item()) > 1e-12 * max(1.0, abs(base.item())):
        raise ContractError("finite_difference_check: analytic surrogate disagrees with f at the base point")
    grads = backward(loss, params.values())
    rng = np.random.default_rng(seed)

    reports = []
    for name, p in params.items():
        exact = grads[p].data.reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            values = []
            for step in (h, -h):
                bumped = flat.copy()
                bumped[i] += step
                trial = dict(params)
                trial[name] = Tensor(bumped.reshape(p.shape))
                values.append(f(trial).item())
            numeric[j] = (values[0] - values[1]) / (2.0 * h)
        a = exact[idx]
        reports.append(ParamReport(
            name=name,
            checked=int(idx.size),
            max_rel_error=float(relative_error(a, numeric).max(initial=0.0)),
            max_abs_error=float(np.abs(a - numeric).max(initial=0.0)),
        ))
    return reports


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    analytic: Callable[[Mapping[str, Tensor]], Tensor] | None = None,
) -> float:
    """Worst relative error between backward() and central differences."""
    reports = gradient_report(f, params, h=h, max_elements=max_elements, seed=seed, analytic=analytic)
    return max((r.max_rel_error for r in reports), default=0.0)
