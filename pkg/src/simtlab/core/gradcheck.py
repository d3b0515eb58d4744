"""Central finite-difference oracle for analytic gradients."""
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: list = field(default_factory=list)  # (path, flat index, analytic, numeric, rel err)

    @property
    def worst(self):
        return max(self.checked, key=lambda row: row[4]) if self.checked else None


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_difference_check(loss_fn, params, samples=20, h=1e-6, tol=1e-4, seed=0):
    """Compare backprop gradients with central differences.

    ``loss_fn()`` must rebuild the loss from the current parameter values
    and be deterministic. Parameters should be 64-bit; ``samples``
    coordinates are drawn uniformly over all parameter entries.
    """
    params.zero_grad()
    loss = loss_fn()
    if not math.isfinite(loss.item()):
        raise NonFiniteLossError(f"loss is {loss.item()} at the base point")
    loss.backward()
    grads = {p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values)) for p, t in params.items()}
    params.zero_grad()

    paths = [p for p, _ in params.items()]
    sizes = np.array([params[p].values.size for p in paths])
    rng = np.random.default_rng(seed)
    flat_picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    report = GradCheckReport(max_rel_err=0.0, passed=True)
    with no_grad():
        for pick in sorted(int(i) for i in flat_picks):
            which = int(np.searchsorted(bounds, pick, side="right"))
            path = paths[which]
            idx = pick - (bounds[which - 1] if which else 0)
            values = params[path].values.reshape(-1)
            original = values[idx]
            values[idx] = original + h
            up = loss_fn().item()
            values[idx] = original - h
            down = loss_fn().item()
            values[idx] = original
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteLossError(f"non-finite loss perturbing {path}[{idx}]: +h -> {up}, -h -> {down}")
            numeric = (up - down) / (2 * h)
            analytic = float(grads[path].reshape(-1)[idx])
            err = relative_error(analytic, numeric)
            report.checked.append((path, int(idx), analytic, numeric, err))
            report.max_rel_err = max(report.max_rel_err, err)
    report.passed = report.max_rel_err < tol
    return report
