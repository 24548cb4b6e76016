"""Per-document source reliability: transformation cost, classifier capacity.

Every target document is scored against every source. The cost side asks how
far the document sits from the source's feature covariance (a pointwise CORAL
surrogate, computed in the lambda=0 source-only encoding space). The capacity
side estimates the density ratio p_T(x)/p_S(x) from a source-vs-target
discriminator trained on the coordinated encodings. The combined log score
ln q + 1/cost picks one source per document; the resulting one-hot indicator
gates the divergence loss during joint training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .coordination import CoordinationPlan, cell_stream
from .data import DomainDataset
from .errors import FormatError, InputError
from .rng import RngStream
from . import single_source

PROB_CLAMP = 1e-6
COST_FLOOR = 1e-6
SCORE_MODES = ("full", "cost_only", "capacity_only")


@dataclass
class CovarianceStats:
    mean: np.ndarray      # (d,)
    full_cov: np.ndarray  # (d, d), symmetric
    n: int


def source_covariance(x: np.ndarray) -> CovarianceStats:
    """Sample covariance (n-1 denominator) of encoding rows, float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"covariance needs a (n>=2, d) matrix, got {x.shape}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return CovarianceStats(mean=mu, full_cov=cov, n=x.shape[0])


def pointwise_target_covariance(x: np.ndarray, r: int | None = None) -> np.ndarray:
    """Per-row outer-product shares C_r; they sum to the sample covariance.

    With r given, just that document's (d, d) share; otherwise all of them
    stacked as (n, d, d).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"pointwise covariance needs a (n>=2, d) matrix, got {x.shape}")
    centered = x - x.mean(axis=0)
    denom = x.shape[0] - 1
    if r is not None:
        if not 0 <= r < x.shape[0]:
            raise InputError(f"row {r} out of range for {x.shape[0]} documents")
        return np.outer(centered[r], centered[r]) / denom
    return np.einsum("ri,rj->rij", centered, centered) / denom


def transformation_cost(c_r: np.ndarray, c_s: np.ndarray) -> np.ndarray | float:
    """Squared Frobenius distance between covariance shares and the source."""
    diff = np.asarray(c_r, dtype=np.float64) - np.asarray(c_s, dtype=np.float64)
    out = np.sum(diff * diff, axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


@dataclass
class DomainDiscriminator:
    w: np.ndarray  # (d,) float64
    b: float
    final_loss: float = float("nan")
    epochs: int = 0


def train_discriminator(
    src_x: np.ndarray,
    tgt_x: np.ndarray,
    rng: RngStream,
    *,
    epochs: int = 200,
    lr: float = 0.1,
    l2: float = 1e-4,
) -> DomainDiscriminator:
    """Logistic source-vs-target classifier, full-batch GD, source labeled 1."""
    src_x = np.asarray(src_x, dtype=np.float64)
    tgt_x = np.asarray(tgt_x, dtype=np.float64)
    if src_x.ndim != 2 or tgt_x.ndim != 2 or src_x.shape[1] != tgt_x.shape[1]:
        raise InputError("discriminator inputs must be 2-D with matching width")
    x = np.vstack([src_x, tgt_x])
    y = np.concatenate([np.ones(src_x.shape[0]), np.zeros(tgt_x.shape[0])])
    gen = rng.generator()
    w = 0.01 * gen.standard_normal(x.shape[1])
    b = 0.0
    n = x.shape[0]
    p = np.full(n, 0.5)
    for _ in range(epochs):
        # sigmoid saturates long before 40; clipping only prevents exp overflow
        z = np.clip(x @ w + b, -40.0, 40.0)
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y
        # weight decay on w only, never the bias
        gw = x.T @ err / n + l2 * w
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
    p_safe = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = float(-np.mean(y * np.log(p_safe) + (1.0 - y) * np.log(1.0 - p_safe)))
    return DomainDiscriminator(w=w, b=float(b), final_loss=bce, epochs=epochs)


def disc_proba(disc: DomainDiscriminator, x: np.ndarray) -> np.ndarray:
    """P(source | x), clamped away from 0 and 1."""
    z = np.clip(np.asarray(x, dtype=np.float64) @ disc.w + disc.b, -40.0, 40.0)
    p = 1.0 / (1.0 + np.exp(-z))
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def ratio_from_proba(p_source: np.ndarray, n_source: int, n_target: int) -> np.ndarray:
    """q = P(T) P(S|x) / (P(S) P(T|x)) with empirical domain priors."""
    if n_source < 1 or n_target < 1:
        raise InputError("density ratio needs positive source and target counts")
    p = np.clip(np.asarray(p_source, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (n_target * p) / (n_source * (1.0 - p))


def density_ratio(
    disc: DomainDiscriminator, x: np.ndarray, n_source: int, n_target: int
) -> np.ndarray:
    return ratio_from_proba(disc_proba(disc, x), n_source, n_target)


def reliability_score(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """ln q + 1/d: the log of q * exp(1/d), safe for tiny costs (d floored)."""
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.log(q) + 1.0 / np.maximum(d, COST_FLOOR)


def build_indicator(log_score: np.ndarray) -> np.ndarray:
    """One-hot row argmax; ties go to the lowest source index."""
    log_score = np.asarray(log_score)
    ind = np.zeros(log_score.shape, dtype=np.int8)
    ind[np.arange(log_score.shape[0]), log_score.argmax(axis=1)] = 1
    return ind


@dataclass
class ReliabilityTable:
    doc_ids: list[str]
    sources: list[str]
    costs: np.ndarray      # (n, M) float64
    q: np.ndarray          # (n, M) float64
    log_score: np.ndarray  # (n, M) float64
    indicator: np.ndarray  # (n, M) int8, one-hot rows


def assemble(
    doc_ids: Sequence[str],
    sources: Sequence[str],
    costs: np.ndarray,
    q: np.ndarray,
    score_mode: str = "full",
) -> ReliabilityTable:
    costs = np.asarray(costs, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n, m = len(doc_ids), len(sources)
    if costs.shape != (n, m) or q.shape != (n, m):
        raise InputError(
            f"expected ({n}, {m}) cost and capacity tables, got {costs.shape} / {q.shape}"
        )
    if score_mode not in SCORE_MODES:
        raise InputError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    if score_mode == "full":
        log_score = reliability_score(q, costs)
    elif score_mode == "cost_only":
        log_score = 1.0 / np.maximum(costs, COST_FLOOR)
    else:
        log_score = np.log(q)
    return ReliabilityTable(
        doc_ids=list(doc_ids),
        sources=list(sources),
        costs=costs,
        q=q,
        log_score=log_score,
        indicator=build_indicator(log_score),
    )


def save_table(table: ReliabilityTable, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["doc_id", "source", "cost", "q", "log_score", "indicator"])
        for r, doc in enumerate(table.doc_ids):
            for k, src in enumerate(table.sources):
                writer.writerow(
                    [
                        doc,
                        src,
                        repr(float(table.costs[r, k])),
                        repr(float(table.q[r, k])),
                        repr(float(table.log_score[r, k])),
                        int(table.indicator[r, k]),
                    ]
                )


def load_table(path: str | Path) -> ReliabilityTable:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["doc_id", "source", "cost", "q", "log_score", "indicator"]:
            raise FormatError(f"{path}: unexpected reliability header {header}")
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: empty reliability table")
    sources: list[str] = []
    for row in rows:
        if row[0] != rows[0][0]:
            break
        sources.append(row[1])
    m = len(sources)
    if m == 0 or len(rows) % m != 0:
        raise FormatError(f"{path}: rows do not tile into per-document source blocks")
    n = len(rows) // m
    doc_ids = []
    costs = np.zeros((n, m))
    q = np.zeros((n, m))
    log_score = np.zeros((n, m))
    indicator = np.zeros((n, m), dtype=np.int8)
    try:
        for r in range(n):
            block = rows[r * m : (r + 1) * m]
            doc_ids.append(block[0][0])
            for k, row in enumerate(block):
                if len(row) != 6 or row[0] != block[0][0] or row[1] != sources[k]:
                    raise FormatError(f"{path}: inconsistent block at document {block[0][0]!r}")
                costs[r, k] = float(row[2])
                q[r, k] = float(row[3])
                log_score[r, k] = float(row[4])
                indicator[r, k] = int(row[5])
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: malformed reliability row ({e})") from e
    return ReliabilityTable(
        doc_ids=doc_ids, sources=sources, costs=costs, q=q,
        log_score=log_score, indicator=indicator,
    )


def compute_costs(
    sources: Sequence[DomainDataset], target: DomainDataset, cfg: TrainConfig
) -> np.ndarray:
    """Transformation costs from lambda=0 source-only encodings, (n_t, M)."""
    out = np.zeros((target.n, len(sources)))
    for k, source in enumerate(sources):
        rng = RngStream(cfg.seed, "reliability").child(f"cost/{source.name}")
        model, _ = single_source.fit_single_source(source, target, 0.0, cfg, rng)
        stats = source_covariance(single_source.encode(model, source.features))
        c_r = pointwise_target_covariance(single_source.encode(model, target.features))
        out[:, k] = transformation_cost(c_r, stats.full_cov)
    return out


def compute_capacities(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    plan: CoordinationPlan,
    cfg: TrainConfig,
) -> np.ndarray:
    """Density ratios at each source's chosen lambda, (n_t, M).

    The encoding space is the coordination run itself: repeat 0 of the
    lambda-star cell, regenerated from the plan's recorded seed so a cached
    plan yields the same capacities as a fresh one.
    """
    out = np.zeros((target.n, len(sources)))
    grid = list(plan.grid)
    for k, source in enumerate(sources):
        lam = plan.lambda_star[source.name]
        rng = cell_stream(plan.seed, source.name, grid.index(lam), 0)
        model, _ = single_source.fit_single_source(source, target, lam, cfg, rng)
        src_enc = single_source.encode(model, source.features)
        tgt_enc = single_source.encode(model, target.features)
        disc = train_discriminator(
            src_enc, tgt_enc, RngStream(cfg.seed, "reliability").child(f"disc/{source.name}")
        )
        out[:, k] = density_ratio(disc, tgt_enc, source.n, target.n)
    return out


def build_table(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    plan: CoordinationPlan,
    cfg: TrainConfig,
    score_mode: str = "full",
) -> ReliabilityTable:
    costs = compute_costs(sources, target, cfg)
    q = compute_capacities(sources, target, plan, cfg)
    return assemble(list(target.ids), [s.name for s in sources], costs, q, score_mode)
