"""Central finite-difference verification of tape gradients.

Gradient checking runs in double precision only; single-precision rounding
sits above any useful finite-difference tolerance. The per-coordinate error
is normalized by ``max(1, |analytic|, |numeric|)`` so the tolerance reads as
a relative error for large gradients and an absolute one near zero.

For losses containing a gradient reversal layer the tape gradient of a
parameter upstream of the reversal is, by construction, not the derivative
of the scalar the forward pass returns. ``fd_objective`` lets the caller
supply the scalar whose derivative the tape is claimed to compute for the
parameters under test (for a reversed branch: reg_loss - lambda * adv_loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fasdg.errors import NumericalError
from fasdg.tensor import GradTape, Tensor, set_debug_checks

SUBSAMPLE_LIMIT = 10_000


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    eps: float
    n_coords: int
    worst_rel_err: float
    worst_param: str
    worst_coord: int
    worst_analytic: float
    worst_numeric: float
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.n_coords} coords checked, worst rel err "
            f"{self.worst_rel_err:.3e} at {self.worst_param}[{self.worst_coord}] "
            f"(analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e}, "
            f"tol {self.tol:g}, eps {self.eps:g})"
        )


def _forward_value(f) -> float:
    out = f()
    if out.size != 1:
        raise NumericalError("gradient check objective must be scalar")
    return float(out.data)


def check_gradients(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    fd_objective=None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    Parameters
    ----------
    f : callable
        Zero-argument callable returning a scalar Tensor; must be
        deterministic and reference ``params`` by closure.
    params : dict
        Named float64 tensors whose gradients are verified, coordinate by
        coordinate. Above ``SUBSAMPLE_LIMIT`` total coordinates a seeded
        random subsample is checked instead.
    fd_objective : callable, optional
        Zero-argument callable returning the float the analytic gradients
        should differentiate; defaults to ``f`` itself.

    Returns
    -------
    GradCheckReport with the worst offender; ``passed`` is False if any
    checked coordinate exceeds ``tol``.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericalError(
                f"gradient check requires float64 parameters; '{name}' is {p.dtype}"
            )
        if not p.requires_grad:
            raise NumericalError(f"parameter '{name}' does not require grad")

    set_debug_checks(True)
    try:
        for p in params.values():
            p.zero_grad()
        with GradTape() as tape:
            out = f()
        if out.size != 1:
            raise NumericalError("gradient check objective must be scalar")
        tape.backward(out)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }

        if fd_objective is None:
            fd_objective = f
        fd = lambda: _forward_value(fd_objective)  # noqa: E731

        total = sum(p.size for p in params.values())
        if rng is None:
            rng = np.random.default_rng(12345)

        worst = (-1.0, "", -1, 0.0, 0.0)
        per_param: dict[str, float] = {}
        n_checked = 0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g_flat = analytic[name].reshape(-1)
            if total > SUBSAMPLE_LIMIT:
                k = max(1, int(round(SUBSAMPLE_LIMIT * p.size / total)))
                coords = np.sort(rng.choice(p.size, size=min(k, p.size), replace=False))
            else:
                coords = np.arange(p.size)
            worst_here = -1.0
            for ix in coords:
                orig = flat[ix]
                flat[ix] = orig + eps
                fp = fd()
                flat[ix] = orig - eps
                fm = fd()
                flat[ix] = orig
                g_num = (fp - fm) / (2.0 * eps)
                g_ana = g_flat[ix]
                denom = max(1.0, abs(g_ana), abs(g_num))
                rel = abs(g_ana - g_num) / denom
                n_checked += 1
                if rel > worst_here:
                    worst_here = rel
                if rel > worst[0]:
                    worst = (rel, name, int(ix), float(g_ana), float(g_num))
            per_param[name] = worst_here
    finally:
        set_debug_checks(False)

    return GradCheckReport(
        passed=worst[0] <= tol,
        tol=tol,
        eps=eps,
        n_coords=n_checked,
        worst_rel_err=worst[0],
        worst_param=worst[1],
        worst_coord=worst[2],
        worst_analytic=worst[3],
        worst_numeric=worst[4],
        per_param=per_param,
    )
