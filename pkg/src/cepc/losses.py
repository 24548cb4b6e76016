"""Alignment and agreement losses.

Each operation returns a LossValue: a float64 scalar plus analytic gradients
keyed by input role. Roles listed in `detached` are treated as constants, so
no gradient entry exists for them and callers must not update them from this
loss. KL terms use natural log with the denominator clamped at KL_EPS; row
values are floored at exactly 0.0 because clamping can otherwise leak an
O(1e-8) negative when the numerator has mass below the floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateBatchError, InputError, ShapeError
from .nn import Matrix, check_matrix

KL_EPS = 1e-7
ROW_SUM_TOL = 1e-4


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray]
    detached: frozenset[str]


def _check_probs(m: Matrix, name: str) -> Matrix:
    m = check_matrix(m, name)
    if (m < 0).any():
        raise InputError(f"{name} has negative entries")
    sums = m.sum(axis=1, dtype=np.float64)
    if (np.abs(sums - 1.0) > ROW_SUM_TOL).any():
        raise InputError(f"{name} rows must sum to 1 within {ROW_SUM_TOL}")
    return m


def _kl_parts(p: Matrix, q: Matrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(p || clamp(q)) and elementwise gradient wrt q."""
    p64 = p.astype(np.float64)
    q64 = np.maximum(q.astype(np.float64), KL_EPS)
    p_safe = np.where(p64 > 0.0, p64, 1.0)  # 0 * ln 0 = 0
    terms = np.where(p64 > 0.0, p64 * (np.log(p_safe) - np.log(q64)), 0.0)
    rows = np.maximum(terms.sum(axis=1), 0.0)
    dq = -(p64 / q64) * (q.astype(np.float64) >= KL_EPS)
    return rows, dq


def kl_rows(p: Matrix, q: Matrix) -> np.ndarray:
    """KL divergence per row, natural log, q clamped at KL_EPS."""
    p = _check_probs(p, "p")
    q = _check_probs(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"p shape {p.shape} != q shape {q.shape}")
    rows, _ = _kl_parts(p, q)
    return rows


def coral_loss(source: Matrix, target: Matrix) -> LossValue:
    """Squared Frobenius gap between sample covariances, scaled by 1/(4 d^2).

    Gradients flow to both batches; value is symmetric under swapping them.
    """
    source = check_matrix(source, "source")
    target = check_matrix(target, "target")
    if source.shape[1] != target.shape[1]:
        raise ShapeError(
            f"feature widths differ: {source.shape[1]} vs {target.shape[1]}"
        )
    n, d = source.shape
    m = target.shape[0]
    if n < 2 or m < 2:
        raise DegenerateBatchError("covariance needs at least 2 rows per batch")
    xs = source.astype(np.float64)
    xt = target.astype(np.float64)
    xs_c = xs - xs.mean(axis=0)
    xt_c = xt - xt.mean(axis=0)
    cov_s = xs_c.T @ xs_c / (n - 1)
    cov_t = xt_c.T @ xt_c / (m - 1)
    delta = cov_s - cov_t
    value = float((delta * delta).sum() / (4.0 * d * d))
    g_src = (xs_c @ delta) / (d * d * (n - 1))
    g_tgt = -(xt_c @ delta) / (d * d * (m - 1))
    return LossValue(
        value=value,
        grads={
            "source": g_src.astype(source.dtype),
            "target": g_tgt.astype(target.dtype),
        },
        detached=frozenset(),
    )


def _check_indicator(indicator: np.ndarray, rows: int) -> np.ndarray:
    ind = np.asarray(indicator, dtype=np.float64)
    if ind.shape != (rows,):
        raise ShapeError(f"indicator shape {ind.shape} != ({rows},)")
    if not np.isin(ind, (0.0, 1.0)).all():
        raise InputError("indicator entries must be 0 or 1")
    return ind


def divergence_psi(
    i: int, class_probs: Sequence[Matrix], indicator: np.ndarray
) -> LossValue:
    """Agreement pressure from reliable source i onto every other classifier.

    Sums KL(C_i || C_k) over indicator-selected rows for each k != i. The
    teacher side C_i is detached; gradients exist only for the k != i roles
    and vanish on rows with indicator 0.
    """
    if len(class_probs) < 2:
        raise ConfigError("need at least two classifiers")
    if not 0 <= i < len(class_probs):
        raise InputError(f"source index {i} out of range")
    probs = [_check_probs(p, f"classifier_{k}") for k, p in enumerate(class_probs)]
    shape = probs[0].shape
    for k, p in enumerate(probs):
        if p.shape != shape:
            raise ShapeError(f"classifier_{k} shape {p.shape} != {shape}")
    ind = _check_indicator(indicator, shape[0])
    teacher = probs[i]
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for k, p in enumerate(probs):
        if k == i:
            continue
        rows, dq = _kl_parts(teacher, p)
        value += float((rows * ind).sum())
        grads[f"classifier_{k}"] = (dq * ind[:, None]).astype(p.dtype)
    return LossValue(value=value, grads=grads, detached=frozenset({f"classifier_{i}"}))


def divergence_loss(psis: Sequence[LossValue]) -> LossValue:
    """Combine per-source psi terms: sum / (M - 1), gradients merged."""
    m = len(psis)
    if m < 2:
        raise ConfigError("divergence needs at least two sources")
    scale = 1.0 / (m - 1)
    value = scale * sum(p.value for p in psis)
    grads: dict[str, np.ndarray] = {}
    for psi in psis:
        for role, g in psi.grads.items():
            if role in grads:
                grads[role] = grads[role] + scale * g
            else:
                grads[role] = scale * g
    detached = frozenset().union(*(p.detached for p in psis)) - set(grads)
    return LossValue(value=float(value), grads=grads, detached=detached)


def medium_loss(
    medium_probs: Sequence[Matrix], source_probs: Sequence[Matrix]
) -> LossValue:
    """Distill every source classifier into each per-encoder medium head.

    value = mean over (encoder, source) pairs of the row-mean KL(C_k || M_e).
    All source classifiers are teachers (detached); gradients reach only the
    medium heads.
    """
    if not medium_probs or not source_probs:
        raise ConfigError("need at least one medium head and one classifier")
    mediums = [_check_probs(q, f"medium_{e}") for e, q in enumerate(medium_probs)]
    teachers = [_check_probs(p, f"classifier_{k}") for k, p in enumerate(source_probs)]
    shape = mediums[0].shape
    for name, mat in [(f"medium_{e}", q) for e, q in enumerate(mediums)] + [
        (f"classifier_{k}", p) for k, p in enumerate(teachers)
    ]:
        if mat.shape != shape:
            raise ShapeError(f"{name} shape {mat.shape} != {shape}")
    g_count, m_count = len(mediums), len(teachers)
    rows_n = shape[0]
    scale = 1.0 / (g_count * m_count)
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for e, q in enumerate(mediums):
        acc = np.zeros(shape, dtype=np.float64)
        for p in teachers:
            rows, dq = _kl_parts(p, q)
            value += rows.mean()
            acc += dq
        grads[f"medium_{e}"] = (scale * acc / rows_n).astype(q.dtype)
    value *= scale
    detached = frozenset(f"classifier_{k}" for k in range(m_count))
    return LossValue(value=float(value), grads=grads, detached=detached)
