"""Central finite differences against the reverse-mode tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from calico.errors import GradCheckError, NonFiniteError
from calico.numerics.layers import Parameter
from calico.numerics.tensor import Tensor, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    rel_tol: float
    step: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.params, key=lambda p: p.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol

    @property
    def failing(self) -> list[str]:
        return [p.name for p in self.params if p.max_rel_error > self.rel_tol]

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        if w is None:
            return f"{status}: no trainable parameters checked"
        return (f"{status}: max rel error {w.max_rel_error:.3e} at {w.name}{list(w.worst_index)} "
                f"(analytic {w.analytic:.6e}, numeric {w.numeric:.6e}), tol {self.rel_tol:.1e}")


def _scalar(value: Tensor | float) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise GradCheckError(f"objective evaluated to non-finite value {v}")
    return v


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-5,
               rel_tol: float = 1e-4, abs_floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every trainable element.

    The relative error of one element is |a - n| / max(|a|, |n|, abs_floor);
    the floor keeps elements whose true gradient is ~0 from dominating on
    rounding noise. That noise is roughly n * eps * |f| / step for a loss
    summed over n terms, a few 1e-9 at step 1e-5 for the toy model, so near-zero
    gradients are effectively held to an absolute tolerance of rel_tol * abs_floor.
    Frozen parameters are skipped.
    """
    if not 0.0 < step <= 1e-2:
        raise GradCheckError(f"step must be in (0, 1e-2], got {step}")
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.grad = None
    try:
        loss = f()
    except NonFiniteError as exc:
        raise GradCheckError(f"objective is not finite: {exc}") from exc
    _scalar(loss)
    loss.backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for p in params}

    def evaluate() -> float:
        with no_grad():
            try:
                return _scalar(f())
            except NonFiniteError as exc:
                raise GradCheckError(f"objective is not finite: {exc}") from exc

    report = GradCheckReport(rel_tol=rel_tol, step=step)
    for p in params:
        data = p.tensor.data
        a = analytic[p.name]
        worst: ParamCheck | None = None
        for idx in np.ndindex(*data.shape):
            orig = data[idx]
            data[idx] = orig + step
            f_plus = evaluate()
            data[idx] = orig - step
            f_minus = evaluate()
            data[idx] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            ana = float(a[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            if worst is None or err > worst.max_rel_error:
                worst = ParamCheck(p.name, err, tuple(int(i) for i in idx), ana, num)
        if worst is not None:
            report.params.append(worst)
    return report
