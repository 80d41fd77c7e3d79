"""
Central finite-difference gradient oracle.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .params import ParamSet

logger = logging.getLogger(__name__)

LossFn = Callable[[ParamSet], Tuple[float, Dict[str, np.ndarray]]]


class GradientCheckError(RuntimeError):
    """The loss under test is not deterministic."""


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    coordinates_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    results: Dict[str, GradCheckResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results.values())

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results.values()), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: rel={r.max_rel_error:.3e} abs={r.max_abs_error:.3e} "
                 f"({r.coordinates_checked} coords) {'ok' if r.passed else 'FAIL'}"
                 for name, r in self.results.items()]
        return "\n".join(lines)


def finite_difference_gradient_check(loss_fn: LossFn, params: ParamSet, eps: float = 1e-5,
                                     tolerance: float = 1e-6, max_coordinates: int = 64,
                                     abs_floor: float = 1e-4,
                                     rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients against (L(t+eps) - L(t-eps)) / 2eps.

    Args:
        loss_fn: Callable taking the ParamSet, returning (loss, gradients by name)
        params: Parameters perturbed in place (restored afterwards)
        eps: Finite-difference step
        tolerance: Maximum accepted relative error
        max_coordinates: Tensors larger than this are sampled (at least 32 coordinates)
        abs_floor: Relative error denominator floor, max(|analytic|, |numeric|, abs_floor)
        rng: Generator for coordinate sampling

    Returns:
        GradCheckReport with one entry per parameter
    """
    rng = rng or np.random.default_rng(0)
    max_coordinates = max(int(max_coordinates), 32)

    loss, analytic = loss_fn(params)
    repeat, _ = loss_fn(params)
    if loss != repeat:
        raise GradientCheckError(f"Loss is nondeterministic: {loss!r} then {repeat!r}")
    analytic = {name: np.array(grad, dtype=np.float64) for name, grad in analytic.items()}

    for name in params:
        if params[name].dtype != np.float64:
            logger.warning(f"Gradient check on '{name}' with dtype {params[name].dtype}; "
                           "results are only meaningful at float64")

    report = GradCheckReport(tolerance=tolerance)
    for name in params:
        theta = params[name]
        if theta.size > max_coordinates:
            coords = np.sort(rng.choice(theta.size, size=max_coordinates, replace=False))
        else:
            coords = np.arange(theta.size)

        flat = theta.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        for index in coords:
            original = flat[index]
            flat[index] = original + eps
            loss_plus, _ = loss_fn(params)
            flat[index] = original - eps
            loss_minus, _ = loss_fn(params)
            flat[index] = original

            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            exact = analytic[name].reshape(-1)[index]
            abs_error = abs(exact - numeric)
            rel_error = abs_error / max(abs(exact), abs(numeric), abs_floor)
            max_abs = max(max_abs, abs_error)
            max_rel = max(max_rel, rel_error)

        report.results[name] = GradCheckResult(name=name, max_rel_error=float(max_rel),
                                               max_abs_error=float(max_abs),
                                               coordinates_checked=len(coords),
                                               passed=bool(max_rel < tolerance))
    return report
