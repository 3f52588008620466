"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.0e})"


def _rel_error(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def gradient_check(f, inputs, eps=1e-4, tol=1e-3, max_entries=None, rng=None):
    """Compare ``backward`` of scalar ``f(*inputs)`` with central differences.

    ``inputs`` are float64 tensors (or arrays); each one is perturbed entry by
    entry. ``max_entries`` limits probing to a random subset per input. The
    error is the max abs difference normalized by the larger gradient norm.
    """
    inputs = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
              for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradient_check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    per_input = []
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data)
            flat[i] = orig - eps
            fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            numeric[j] = (fp - fm) / (2 * eps)
        err = _rel_error(analytic.reshape(-1)[idx], numeric)
        per_input.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, tol, per_input)
