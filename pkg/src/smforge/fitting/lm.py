"""Damped least squares (Levenberg-Marquardt) with box bounds.

Bounds are handled by smooth variable transforms so the iteration itself is
unconstrained: logistic for a finite box, exponential for a one-sided bound.
Covariances are computed in the external (bounded) parameter space.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Bound = tuple[Optional[float], Optional[float]]


@dataclass
class FitOptions:
    max_iterations: int = 200
    xtol: float = 1e-8
    gtol: float = 1e-10
    ftol: float = 1e-12
    damping: float = 1e-3
    bounds: Optional[Sequence[Bound]] = None
    # residual norm at or below this counts as an exact fit
    atol_residual: float = 0.0

    def __post_init__(self):
        if min(self.xtol, self.gtol, self.damping) <= 0 or self.ftol < 0:
            raise ValueError("tolerances and damping must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class FitResult:
    params: np.ndarray
    sigma: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    model: str = "custom"
    names: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    covariance: Optional[np.ndarray] = field(default=None, repr=False)
    cost_history: list[float] = field(default_factory=list, repr=False)
    data_digest: str = ""

    def __getitem__(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def err(self, name: str) -> float:
        return float(self.sigma[self.names.index(name)])

    def to_dict(self) -> dict:
        def clean(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "model": self.model,
            "names": list(self.names),
            "params": [clean(v) for v in self.params],
            "sigma": [clean(v) for v in self.sigma],
            "residual_norm": clean(self.residual_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "flags": list(self.flags),
            "data_digest": self.data_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        def unclean(v):
            return math.inf if v is None else float(v)

        return cls(
            params=np.array([unclean(v) for v in d["params"]]),
            sigma=np.array([unclean(v) for v in d["sigma"]]),
            residual_norm=unclean(d["residual_norm"]),
            iterations=d["iterations"],
            converged=d["converged"],
            model=d["model"],
            names=tuple(d["names"]),
            flags=tuple(d.get("flags", ())),
            data_digest=d.get("data_digest", ""),
        )


def data_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


class _Transform:
    """Maps internal unconstrained u to external bounded p, per parameter."""

    def __init__(self, bounds: Optional[Sequence[Bound]], n: int):
        bounds = list(bounds) if bounds is not None else [(None, None)] * n
        if len(bounds) != n:
            raise ValueError(f"expected {n} bounds, got {len(bounds)}")
        self.lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds], dtype=float)
        self.hi = np.array([np.inf if b[1] is None else b[1] for b in bounds], dtype=float)
        if np.any(self.lo >= self.hi):
            raise ValueError("each lower bound must be below its upper bound")
        self.box = np.isfinite(self.lo) & np.isfinite(self.hi)
        self.lower = np.isfinite(self.lo) & ~self.box
        self.upper = np.isfinite(self.hi) & ~self.box

    def to_external(self, u):
        p = u.copy()
        uc = np.clip(u, -700.0, 700.0)
        p[self.lower] = self.lo[self.lower] + np.exp(uc[self.lower])
        p[self.upper] = self.hi[self.upper] - np.exp(uc[self.upper])
        b = self.box
        p[b] = self.lo[b] + (self.hi[b] - self.lo[b]) / (1.0 + np.exp(-uc[b]))
        return p

    def derivative(self, u):
        d = np.ones_like(u)
        uc = np.clip(u, -700.0, 700.0)
        d[self.lower] = np.exp(uc[self.lower])
        d[self.upper] = -np.exp(uc[self.upper])
        b = self.box
        s = 1.0 / (1.0 + np.exp(-uc[b]))
        d[b] = (self.hi[b] - self.lo[b]) * s * (1.0 - s)
        return d

    def to_internal(self, p):
        p = np.asarray(p, dtype=float).copy()
        u = p.copy()
        width = np.where(self.box, self.hi - self.lo, 1.0)
        eps = 1e-9 * np.where(self.box, width, np.maximum(np.abs(p), 1.0))
        m = self.lower
        u[m] = np.log(np.maximum(p[m] - self.lo[m], eps[m]))
        m = self.upper
        u[m] = np.log(np.maximum(self.hi[m] - p[m], eps[m]))
        m = self.box
        q = np.clip(p[m], self.lo[m] + eps[m], self.hi[m] - eps[m])
        u[m] = np.log((q - self.lo[m]) / (self.hi[m] - q))
        return u


def finite_difference_jacobian(fun: Callable, p: np.ndarray, r0: Optional[np.ndarray] = None, rel_step: float = 1e-6):
    """Central differences; the step is ``rel_step * |p_i|``, or ``rel_step`` where ``p_i == 0``."""
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(p.size):
        h = rel_step * (abs(p[i]) if p[i] != 0 else 1.0)
        hi = p.copy()
        lo = p.copy()
        hi[i] += h
        lo[i] -= h
        cols.append((np.asarray(fun(hi)) - np.asarray(fun(lo))) / (hi[i] - lo[i]))
    return np.column_stack(cols)


def covariance_from_jacobian(J: np.ndarray, cost: float):
    """Scaled covariance s^2 (J^T J)^-1 with s^2 = 2 cost / (m - n).

    Directions with vanishing curvature get infinite variance rather than the
    zero a plain pseudo-inverse would report.
    """
    m, n = J.shape
    A = J.T @ J
    if m <= n:
        return np.full((n, n), np.inf)
    s2 = 2.0 * cost / (m - n)
    w, V = np.linalg.eigh(A)
    wmax = max(float(w.max()), 0.0)
    tiny = w <= 1e-13 * wmax if wmax > 0 else np.ones_like(w, dtype=bool)
    inv = np.where(tiny, 0.0, 1.0 / np.where(tiny, 1.0, w))
    cov = (V * inv) @ V.T * s2
    if np.any(tiny):
        bad = np.any(np.abs(V[:, tiny]) > 1e-8, axis=1)
        cov[bad, :] = np.inf
        cov[:, bad] = np.inf
    return cov


def levenberg_marquardt(
    residuals: Callable[[np.ndarray], np.ndarray],
    x0,
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    options: Optional[FitOptions] = None,
    names: Sequence[str] = (),
    model: str = "custom",
) -> FitResult:
    """Minimise ``0.5 * |residuals(p)|^2`` starting from ``x0``.

    Parameters
    ----------
    residuals : callable
        Maps the external parameter vector to a residual vector.
    x0 : array_like
        Finite starting point; clipped into the bounds if needed.
    jac : callable, optional
        Jacobian of ``residuals`` w.r.t. the external parameters. Central
        finite differences are used when omitted.
    options : FitOptions, optional

    Notes
    -----
    Accepted steps never increase the cost. A singular damped system raises
    the damping instead of failing. An undamped Gauss-Newton step is tried
    first whenever the previous step was predicted well by the quadratic
    model; it is kept only if it is predicted well too.
    """
    opts = options or FitOptions()
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial parameters must be finite")
    n = x0.size
    tf = _Transform(opts.bounds, n)

    def jac_ext(p, r):
        if jac is not None:
            return np.asarray(jac(p), dtype=float).reshape(r.size, n)
        return finite_difference_jacobian(residuals, p, r)

    u = tf.to_internal(x0)
    p = tf.to_external(u)
    r = np.asarray(residuals(p), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("model is not finite at the initial parameters")
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = opts.damping
    converged = False
    stalled = False
    try_gn = True
    it = 0
    while it < opts.max_iterations:
        it += 1
        if math.sqrt(2.0 * cost) <= opts.atol_residual:
            converged = True
            break
        Jp = jac_ext(p, r)
        J = Jp * tf.derivative(u)
        g = J.T @ r
        rnorm = math.sqrt(2.0 * cost)
        cnorm = np.linalg.norm(J, axis=0)
        if rnorm == 0.0:
            converged = True
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(cnorm > 0, np.abs(g) / (cnorm * rnorm), 0.0)
        if float(np.max(cosines)) <= opts.gtol:
            converged = True
            break
        A = J.T @ J
        d = np.diag(A).copy()
        dmax = float(d.max()) if d.size else 0.0
        d = np.maximum(d, 1e-12 * dmax if dmax > 0 else 1e-12)

        accepted = False
        trials = ([0.0] if try_gn else []) + [None]
        while True:
            trial_lam = trials.pop(0) if trials else None
            gn_trial = trial_lam == 0.0
            use = lam if trial_lam is None else trial_lam
            try:
                step = np.linalg.solve(A + use * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                if gn_trial:
                    continue
                lam *= 10.0
                if lam > 1e20:
                    stalled = True
                    break
                trials = [None]
                continue
            u_new = u + step
            p_new = tf.to_external(u_new)
            with np.errstate(over="ignore", invalid="ignore"):
                # an overflowing trial step is simply rejected
                r_new = np.asarray(residuals(p_new), dtype=float)
                cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            predicted = -(float(g @ step) + 0.5 * float(step @ A @ step))
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if cost_new <= cost and (not gn_trial or rho >= 0.75):
                accepted = True
                break
            if gn_trial:
                continue
            lam *= 10.0
            if lam > 1e20:
                stalled = True
                break
            trials = [None]
        if not accepted:
            # no downhill step at any damping: numerically stationary
            converged = True
            break
        small_step = np.linalg.norm(step) <= opts.xtol * (np.linalg.norm(u) + opts.xtol)
        small_gain = (cost - cost_new) <= opts.ftol * cost
        u, p, r, cost = u_new, p_new, r_new, cost_new
        history.append(cost)
        try_gn = rho > 0.9
        if not gn_trial:
            lam = max(lam / 10.0, 1e-15)
        if small_step or small_gain:
            converged = True
            break

    Jp_final = jac_ext(p, r)
    cov = covariance_from_jacobian(Jp_final, cost)
    sigma = np.sqrt(np.clip(np.diag(cov), 0.0, np.inf))
    flags = ("stalled",) if stalled else ()
    return FitResult(
        params=p,
        sigma=sigma,
        residual_norm=math.sqrt(2.0 * cost),
        iterations=it,
        converged=converged,
        model=model,
        names=tuple(names) if names else tuple(f"p{i}" for i in range(n)),
        flags=flags,
        covariance=cov,
        cost_history=history,
    )
