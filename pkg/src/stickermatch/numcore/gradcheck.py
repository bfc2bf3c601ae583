"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward

# Below this magnitude a gradient entry is compared in absolute rather than relative terms;
# float64 roundoff of a central difference at eps=1e-5 sits around 1e-11 for O(1) losses.
DEFAULT_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_error: float = 0.0
    mean_rel_error: float = 0.0
    n_checked: int = 0
    deterministic: bool = True
    worst: str | None = None

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.deterministic and self.max_rel_error < threshold

    def summary(self) -> str:
        lines = [f"{name:<40s} {err:.3e}" for name, err in sorted(self.per_param.items())]
        status = "deterministic" if self.deterministic else "NON-DETERMINISTIC loss_fn"
        lines.append(
            f"checked {self.n_checked} coordinates: max rel err {self.max_rel_error:.3e} "
            f"(worst {self.worst}), mean {self.mean_rel_error:.3e}, {status}"
        )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    eps: float = 1e-5,
    max_per_param: int | None = None,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    ``loss_fn`` takes no arguments and must read the current values of
    ``params``; their ``data`` arrays are perturbed in place and restored.
    When ``max_per_param`` is set, that many coordinates are sampled from each
    parameter (reproducibly, from ``seed``) instead of checking every entry.
    A loss that changes between two evaluations at the same point is reported
    as non-deterministic rather than raising.
    """
    named = dict(params) if isinstance(params, Mapping) else {f"param{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None

    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}

    report = GradCheckReport()
    again = float(loss_fn().data)
    if again != float(loss.data):
        report.deterministic = False
        report.max_rel_error = float("inf")
        return report

    rng = np.random.default_rng(seed)
    errors: list[float] = []
    for name, p in named.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        worst = 0.0
        g = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().data)
            flat[i] = orig - eps
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = relative_error(float(g[i]), numeric, floor)
            errors.append(err)
            worst = max(worst, err)
        report.per_param[name] = worst
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = name
    report.n_checked = len(errors)
    report.mean_rel_error = float(np.mean(errors)) if errors else 0.0
    return report
