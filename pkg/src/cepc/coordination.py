"""Scale-factor coordination across sources.

Each source trains single-source models over the lambda grid (with repeats);
the target pseudo-labelings those models produce are scored for cross-source
agreement. A deterministic coordinate ascent then picks one lambda per source:
candidates are ordered by the Jensen-Shannon distance between the source label
distribution and the pseudo-label distribution, each source starts at its
JS-minimizing lambda, and a source only advances to its next candidate when
normalized agreement improves by more than the threshold. Sources that end on
the same lambda share an encoder group downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .data import DomainDataset
from .errors import ConfigError, FormatError, InputError
from .metrics import f1_metrics
from .rng import RngStream
from . import single_source


@dataclass
class SingleSourceRun:
    """One grid cell: a trained single-source model's target-side artifacts."""

    source: str
    lam: float
    repeat: int
    pseudo_labels: np.ndarray
    target_label_distribution: np.ndarray
    stored_source_encodings: np.ndarray
    stored_target_encodings: np.ndarray
    js_to_source: float


@dataclass
class CoordinationPlan:
    lambda_star: dict[str, float]
    groups: list[list[str]]
    seed: int
    grid: tuple[float, ...]
    repeats: int
    diagnostics: dict = field(default_factory=dict)


def js_distance(p: Sequence[float], q: Sequence[float]) -> float:
    """Square root of the base-2 Jensen-Shannon divergence; lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InputError(f"distributions must share a 1-D shape, got {p.shape} / {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or abs(v.sum() - 1.0) > 1e-6:
            raise InputError(f"{name} is not a probability distribution")
    m = 0.5 * (p + q)

    def kl2(a: np.ndarray) -> float:
        mask = a > 0
        return float((a[mask] * np.log2(a[mask] / m[mask])).sum())

    jsd = 0.5 * kl2(p) + 0.5 * kl2(q)
    return math.sqrt(max(jsd, 0.0))


def pairwise_agreement(label_sets: Sequence[np.ndarray]) -> float:
    """Sum of F1 over all ordered pairs of labelings (i as gold, j as pred)."""
    if len(label_sets) < 2:
        raise ConfigError("agreement needs at least two labelings")
    total = 0.0
    for i, gold in enumerate(label_sets):
        for j, pred in enumerate(label_sets):
            if i == j:
                continue
            f1, _, _ = f1_metrics(gold, pred)
            total += f1
    return total


def cell_stream(seed: int, source_name: str, grid_index: int, repeat: int) -> RngStream:
    return RngStream(seed, "coord").child(f"{source_name}/lam{grid_index}/rep{repeat}")


def train_single_source(
    source: DomainDataset,
    target: DomainDataset,
    lam: float,
    rng: RngStream,
    cfg: TrainConfig,
    repeat: int = 0,
) -> SingleSourceRun:
    """Train one grid cell and capture pseudo-labels plus final encodings."""
    model, _ = single_source.fit_single_source(source, target, lam, cfg, rng)
    src_enc = single_source.encode(model, source.features)
    tgt_enc = single_source.encode(model, target.features)
    from .nn import mlp_forward

    probs = mlp_forward(model.classifier, tgt_enc).outputs
    pseudo = probs.argmax(axis=1).astype(np.int8)
    dist = np.bincount(pseudo, minlength=2).astype(np.float64) / pseudo.size
    js = js_distance(source.label_distribution(), dist)
    return SingleSourceRun(
        source=source.name,
        lam=lam,
        repeat=repeat,
        pseudo_labels=pseudo,
        target_label_distribution=dist,
        stored_source_encodings=src_enc,
        stored_target_encodings=tgt_enc,
        js_to_source=js,
    )


def run_grid(
    sources: Sequence[DomainDataset], target: DomainDataset, cfg: TrainConfig
) -> list[SingleSourceRun]:
    """Exactly len(sources) * len(grid) * repeats trainings, one per cell."""
    runs: list[SingleSourceRun] = []
    for source in sources:
        for gi, lam in enumerate(cfg.grid):
            for rep in range(cfg.repeats):
                rng = cell_stream(cfg.seed, source.name, gi, rep)
                runs.append(train_single_source(source, target, lam, rng, cfg, repeat=rep))
    return runs


def select_lambdas(
    runs: Sequence[SingleSourceRun],
    source_order: Sequence[str],
    cfg: TrainConfig,
) -> CoordinationPlan:
    """Coordinate-ascent lambda selection over cached grid runs."""
    grid = cfg.grid
    names = list(source_order)
    if len(names) < 2:
        raise ConfigError("coordination needs at least two sources")
    cells: dict[tuple[str, int], list[SingleSourceRun]] = {}
    lam_index = {lam: gi for gi, lam in enumerate(grid)}
    for run in runs:
        if run.source not in names:
            raise ConfigError(f"run for unknown source {run.source!r}")
        if run.lam not in lam_index:
            raise ConfigError(f"run at lambda {run.lam} not on the grid")
        cells.setdefault((run.source, lam_index[run.lam]), []).append(run)
    for name in names:
        for gi in range(len(grid)):
            got = cells.get((name, gi), [])
            if len(got) != cfg.repeats:
                raise ConfigError(
                    f"cell ({name}, lambda={grid[gi]}) has {len(got)} repeats, "
                    f"expected {cfg.repeats}"
                )
            got.sort(key=lambda r: r.repeat)

    # repeat-averaged agreement for every cross-source cell pair
    def mean_f1(a: list[SingleSourceRun], b: list[SingleSourceRun]) -> float:
        total = 0.0
        for ra in a:
            for rb in b:
                f1, _, _ = f1_metrics(ra.pseudo_labels, rb.pseudo_labels)
                total += f1
        return total / (len(a) * len(b))

    agree: dict[tuple[str, int, str, int], float] = {}
    for a in names:
        for b in names:
            if a == b:
                continue
            for ga in range(len(grid)):
                for gb in range(len(grid)):
                    agree[(a, ga, b, gb)] = mean_f1(cells[(a, ga)], cells[(b, gb)])

    js_mean = {
        (name, gi): float(np.mean([r.js_to_source for r in cells[(name, gi)]]))
        for name in names
        for gi in range(len(grid))
    }
    # per-source candidate order: ascending JS, grid order breaks ties
    candidates = {
        name: sorted(range(len(grid)), key=lambda gi: (js_mean[(name, gi)], gi))
        for name in names
    }
    pos = {name: 0 for name in names}
    pair_count = len(names) * (len(names) - 1)

    def norm_corr(assignment: dict[str, int]) -> float:
        total = 0.0
        for a in names:
            for b in names:
                if a != b:
                    total += agree[(a, candidates[a][assignment[a]], b, candidates[b][assignment[b]])]
        return total / pair_count

    current = norm_corr(pos)
    initial = current
    moves: list[dict] = []
    passes = 0
    while True:
        passes += 1
        moved = False
        for name in names:
            if pos[name] + 1 >= len(grid):
                continue
            trial = dict(pos)
            trial[name] = pos[name] + 1
            cand = norm_corr(trial)
            if cand > current + cfg.agreement_threshold:
                moves.append(
                    {
                        "source": name,
                        "from": grid[candidates[name][pos[name]]],
                        "to": grid[candidates[name][trial[name]]],
                        "corr": cand,
                    }
                )
                pos = trial
                current = cand
                moved = True
        if not moved:
            break

    lambda_star = {name: grid[candidates[name][pos[name]]] for name in names}
    groups: list[list[str]] = []
    seen: dict[float, int] = {}
    for name in names:
        lam = lambda_star[name]
        if lam in seen:
            groups[seen[lam]].append(name)
        else:
            seen[lam] = len(groups)
            groups.append([name])
    diagnostics = {
        "initial_corr": initial,
        "normalized_corr": current,
        "passes": passes,
        "moves": moves,
        "js_mean": {
            name: {repr(grid[gi]): js_mean[(name, gi)] for gi in range(len(grid))}
            for name in names
        },
    }
    return CoordinationPlan(
        lambda_star=lambda_star,
        groups=groups,
        seed=cfg.seed,
        grid=tuple(grid),
        repeats=cfg.repeats,
        diagnostics=diagnostics,
    )


def coordinate(
    sources: Sequence[DomainDataset], target: DomainDataset, cfg: TrainConfig
) -> CoordinationPlan:
    runs = run_grid(sources, target, cfg)
    return select_lambdas(runs, [s.name for s in sources], cfg)


def group_encoders(plan: CoordinationPlan) -> dict[str, int]:
    """Source name -> encoder group index, in plan group order."""
    out: dict[str, int] = {}
    for gid, group in enumerate(plan.groups):
        for name in group:
            out[name] = gid
    return out


def save_plan(plan: CoordinationPlan, path: str | Path) -> None:
    obj = {
        "lambda_star": plan.lambda_star,
        "groups": plan.groups,
        "seed": plan.seed,
        "grid": list(plan.grid),
        "repeats": plan.repeats,
        "diagnostics": plan.diagnostics,
    }
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> CoordinationPlan:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed plan JSON ({e})") from e
    required = {"lambda_star", "groups", "seed", "grid", "repeats"}
    if not isinstance(obj, dict) or not required <= set(obj):
        raise FormatError(f"{path}: plan needs keys {sorted(required)}")
    plan = CoordinationPlan(
        lambda_star={str(k): float(v) for k, v in obj["lambda_star"].items()},
        groups=[[str(n) for n in g] for g in obj["groups"]],
        seed=int(obj["seed"]),
        grid=tuple(float(v) for v in obj["grid"]),
        repeats=int(obj["repeats"]),
        diagnostics=obj.get("diagnostics", {}),
    )
    grouped = [n for g in plan.groups for n in g]
    if sorted(grouped) != sorted(plan.lambda_star):
        raise FormatError(f"{path}: groups do not cover lambda_star sources")
    return plan
