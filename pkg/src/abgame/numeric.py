"""Array checks, seeded randomness and the projection/inverse kernels."""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .errors import DimensionError, DivergenceError, NonFiniteError, ParameterError

SIMPLEX_TOL = 1e-12


def as_finite(a, name: str = "array", ndim: int | None = None) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf and wrong rank."""
    arr = np.asarray(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def sigmoid(z):
    # tanh form is overflow free for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def softplus(z):
    return np.logaddexp(0.0, z)


# --------------------------------------------------------------------------
# seeded randomness
# --------------------------------------------------------------------------

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ParameterError("seed keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for ``seed`` split by a path of keys, e.g. ``(rep, "attack")``.

    Keys may be ints or strings; strings are hashed with crc32 so the
    mapping is stable across interpreter runs.
    """
    if seed < 0 or seed >= 2**64:
        raise ParameterError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# projections
# --------------------------------------------------------------------------

def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-and-threshold construction, O(m log m).
    """
    v = as_finite(v, "v", ndim=1)
    m = v.size
    if m == 0:
        raise DimensionError("cannot project an empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, m + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    # renormalise away the last ulp so the sum invariant holds tightly
    return w / w.sum()


def check_simplex(w, tol: float = SIMPLEX_TOL) -> bool:
    w = np.asarray(w, dtype=np.float64)
    return bool(w.ndim == 1 and w.size >= 1 and np.all(w >= 0) and abs(w.sum() - 1.0) <= tol)


def project_box(x, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ParameterError(f"box requires lo < hi, got [{lo}, {hi}]")
    return np.clip(as_finite(x, "x"), lo, hi)


# --------------------------------------------------------------------------
# Neumann series inverse
# --------------------------------------------------------------------------

def neumann_inverse_apply(
    hvp: Callable[[np.ndarray], np.ndarray],
    v,
    steps: int,
    scale: float,
) -> np.ndarray:
    """Approximate ``H^{-1} v`` from Hessian-vector products alone.

    Returns ``scale * sum_{i<steps} (I - scale*H)^i v``.  Converges when the
    spectral radius of ``I - scale*H`` is below one, which for SPD ``H``
    means ``0 < scale < 2/lambda_max``.
    """
    if steps < 1:
        raise ParameterError("Neumann series needs at least one step")
    if not scale > 0:
        raise ParameterError("Neumann scale must be positive")
    term = as_finite(v, "v").copy()
    acc = term.copy()
    for _ in range(steps - 1):
        term = term - scale * hvp(term)
        if not np.all(np.isfinite(term)):
            raise DivergenceError(
                f"Neumann series diverged with scale={scale:g}; use a smaller scale"
            )
        acc += term
    out = scale * acc
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"Neumann series overflowed with scale={scale:g}; use a smaller scale")
    return out


def trace_estimate(
    hvp: Callable[[np.ndarray], np.ndarray],
    dim: int,
    rng: np.random.Generator | None = None,
    probes: int = 32,
    exact_below: int = 64,
) -> float:
    """Trace of the operator: exact via basis vectors for small ``dim``, else Hutchinson."""
    if dim <= exact_below:
        eye = np.eye(dim)
        return float(sum(hvp(eye[i])[i] for i in range(dim)))
    if rng is None:
        rng = make_rng(0, "trace")
    acc = 0.0
    for _ in range(probes):
        z = rng.choice([-1.0, 1.0], size=dim)
        acc += float(z @ hvp(z))
    return acc / probes


def default_neumann_scale(hvp, dim: int, rng=None) -> float:
    """1 / trace(H): for SPD ``H`` the trace bounds lambda_max, so the series converges."""
    tr = trace_estimate(hvp, dim, rng)
    if not tr > 0:
        raise DivergenceError("Hessian trace estimate is not positive; supply an explicit scale")
    return 1.0 / tr
