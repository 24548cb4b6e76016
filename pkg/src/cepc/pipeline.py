"""Experiment orchestration: the full run, reference baselines, ablations,
and report rendering.

One MetricsReport covers one (manifest, config, seed) run as a list of method
rows; render_report aggregates several reports (typically one per seed) into
an aligned mean +/- std table plus a machine JSON document. Every average in
a row is recomputable from that row's per-domain entries.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import coordination as co
from . import reliability as rel
from . import single_source as ss
from . import trainer as tr
from .config import TrainConfig
from .data import DomainDataset, as_unlabeled, load_manifest
from .errors import ConfigError, DataError, StageError
from .metrics import f1_metrics
from .rng import RngStream

METRIC_KEYS = ("f1", "precision", "recall")


@dataclass
class MetricsReport:
    rows: list[dict]
    metadata: dict

    def validate(self) -> None:
        for row in self.rows:
            for key in METRIC_KEYS:
                if not 0.0 <= row[key] <= 1.0:
                    raise DataError(f"row {row['method']}: {key}={row[key]} out of range")
            avg = _average(row["per_domain"])
            for key in METRIC_KEYS:
                if abs(avg[key] - row["average"][key]) > 1e-9:
                    raise DataError(f"row {row['method']}: stale {key} average")

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": self.rows}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if not isinstance(doc, dict) or "rows" not in doc or "metadata" not in doc:
            raise DataError("report document needs 'rows' and 'metadata'")
        return cls(rows=list(doc["rows"]), metadata=dict(doc["metadata"]))


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def _load(manifest) -> tuple[list[DomainDataset], DomainDataset, DomainDataset | None]:
    """Accept a manifest path or an already-loaded (sources, target, gold)."""
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    sources, target, gold = manifest
    return list(sources), target, gold


def _metric_dict(gold_labels: np.ndarray, pred: np.ndarray) -> dict:
    f1, precision, recall = f1_metrics(gold_labels, pred)
    return {"f1": f1, "precision": precision, "recall": recall}


def _average(per_domain: dict) -> dict:
    vals = list(per_domain.values())
    return {k: sum(m[k] for m in vals) / len(vals) for k in METRIC_KEYS}


def _joint_row(
    method: str,
    model: tr.CepcModel,
    target: DomainDataset,
    gold_labels: np.ndarray,
    extras: dict | None = None,
) -> dict:
    det = tr.predict_details(model, target.features)
    per = {
        name: _metric_dict(gold_labels, det.votes[i])
        for i, name in enumerate(model.source_names)
    }
    row = {
        "method": method,
        **_metric_dict(gold_labels, det.labels),
        "per_domain": per,
        "average": _average(per),
    }
    if extras:
        row["extras"] = extras
    return row


def _single_row(
    method: str,
    model: ss.SingleSourceModel,
    domain_name: str,
    target: DomainDataset,
    gold_labels: np.ndarray,
    extras: dict | None = None,
) -> dict:
    pred = ss.predict_probs(model, target.features).argmax(axis=1).astype(np.int8)
    per = {domain_name: _metric_dict(gold_labels, pred)}
    row = {"method": method, **per[domain_name], "per_domain": per, "average": _average(per)}
    if extras:
        row["extras"] = extras
    return row


def _require_gold(gold: DomainDataset | None) -> DomainDataset:
    if gold is None:
        raise DataError("scoring needs gold target labels in the manifest")
    return gold


def _metadata(cfg: TrainConfig, plan: co.CoordinationPlan, score_mode: str) -> dict:
    return {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "score_mode": score_mode,
        "plan": {
            "lambda_star": dict(sorted(plan.lambda_star.items())),
            "groups": plan.groups,
            "normalized_corr": plan.diagnostics.get("normalized_corr"),
        },
    }


def write_predictions(
    det: tr.Prediction, target: DomainDataset, source_names: Sequence[str], path: str | Path
) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["doc_id", "pred", "prob_0", "prob_1"] + [f"vote_{n}" for n in source_names]
        )
        for r, doc_id in enumerate(target.ids):
            writer.writerow(
                [doc_id, int(det.labels[r])]
                + [repr(float(p)) for p in det.mean_probs[r]]
                + [int(v) for v in det.votes[:, r]]
            )


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def run_pipeline(
    manifest,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    *,
    plan: co.CoordinationPlan | str | Path | None = None,
    table: rel.ReliabilityTable | str | Path | None = None,
    baselines: bool = False,
    ablations: bool = False,
    score_mode: str = "full",
) -> MetricsReport:
    """Coordinate -> reliability -> train -> predict -> score, in one call.

    A cached plan or reliability table (object or file path) skips its stage.
    Every failure is re-raised as a StageError naming the stage.
    """
    cfg.validate()
    sources, target, gold = _stage("load", _load, manifest)
    gold = _stage("load", _require_gold, gold)

    if plan is None:
        plan = _stage("coordinate", co.coordinate, sources, target, cfg)
    elif isinstance(plan, (str, Path)):
        plan = _stage("coordinate", co.load_plan, plan)

    costs = q = None
    if table is None:
        costs = _stage("reliability", rel.compute_costs, sources, target, cfg)
        q = _stage("reliability", rel.compute_capacities, sources, target, plan, cfg)
        table = _stage(
            "reliability",
            rel.assemble,
            list(target.ids),
            [s.name for s in sources],
            costs,
            q,
            score_mode,
        )
    elif isinstance(table, (str, Path)):
        table = _stage("reliability", rel.load_table, table)

    model, trace = _stage("train", tr.train_cepc, sources, target, plan, table, cfg)
    det = _stage("predict", tr.predict_details, model, target.features)

    rows = [
        _stage(
            "metrics",
            _joint_row,
            "cepc",
            model,
            target,
            gold.labels,
            {"lambda_star": dict(sorted(plan.lambda_star.items()))},
        )
    ]
    if baselines:
        rows.extend(
            _stage("baselines", run_baselines, (sources, target, gold), cfg, costs=costs)
        )
    if ablations:
        rows.extend(
            _stage(
                "ablations",
                run_ablations,
                (sources, target, gold),
                cfg,
                plan=plan,
                costs=costs,
                q=q,
            )
        )

    report = MetricsReport(rows=rows, metadata=_metadata(cfg, plan, score_mode))
    report.validate()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _stage("write", write_report, report, out / "report.json")
        _stage("write", write_predictions, det, target, model.source_names, out / "predictions.csv")
        _stage("write", tr.save_trace, trace, out / "trace.csv")
        _stage("write", tr.save_checkpoint, model, out / "model.ckpt")
    return report


def _pool_sources(sources: Sequence[DomainDataset]) -> DomainDataset:
    return DomainDataset(
        name="combined",
        role="source",
        ids=[f"{s.name}:{doc_id}" for s in sources for doc_id in s.ids],
        labels=np.concatenate([s.labels for s in sources]),
        features=np.vstack([s.features for s in sources]),
    )


def _fixed_plan(sources: Sequence[DomainDataset], lam: float, cfg: TrainConfig) -> co.CoordinationPlan:
    # one shared encoder: a globally fixed lambda makes every assignment equal
    return co.CoordinationPlan(
        lambda_star={s.name: lam for s in sources},
        groups=[[s.name for s in sources]],
        seed=cfg.seed,
        grid=cfg.grid,
        repeats=cfg.repeats,
    )


def _grouped_plan(
    sources: Sequence[DomainDataset], chosen: dict[str, float], cfg: TrainConfig
) -> co.CoordinationPlan:
    groups: list[list[str]] = []
    slot: dict[float, int] = {}
    for s in sources:
        lam = chosen[s.name]
        if lam in slot:
            groups[slot[lam]].append(s.name)
        else:
            slot[lam] = len(groups)
            groups.append([s.name])
    return co.CoordinationPlan(
        lambda_star=dict(chosen), groups=groups, seed=cfg.seed, grid=cfg.grid,
        repeats=cfg.repeats,
    )


def meta_target_lambdas(sources: Sequence[DomainDataset], cfg: TrainConfig) -> dict[str, float]:
    """Leave-one-source-out lambda per source.

    Each source adapts to every other source as a pseudo-target; its lambda is
    the grid value maximizing the mean F1 there (ties keep the earlier grid
    entry). No target documents are touched.
    """
    if len(sources) < 2:
        raise ConfigError("meta-target tuning needs at least two sources")
    meta = RngStream(cfg.seed, "meta")
    chosen: dict[str, float] = {}
    for src in sources:
        best_lam, best_f1 = cfg.grid[0], -1.0
        for gi, lam in enumerate(cfg.grid):
            f1s = []
            for held in sources:
                if held.name == src.name:
                    continue
                rng = meta.child(f"{src.name}/heldout/{held.name}/lam{gi}")
                model, _ = ss.fit_single_source(
                    src, as_unlabeled(held, name=f"{held.name}-held"), lam, cfg, rng
                )
                pred = ss.predict_probs(model, held.features).argmax(axis=1)
                f1s.append(f1_metrics(held.labels, pred)[0])
            mean_f1 = sum(f1s) / len(f1s)
            if mean_f1 > best_f1:
                best_lam, best_f1 = lam, mean_f1
        chosen[src.name] = best_lam
    return chosen


def run_baselines(manifest, cfg: TrainConfig, *, costs: np.ndarray | None = None) -> list[dict]:
    """Reference rows: source-only (each + oracle best), combined, fixed-lambda
    sweep, and meta-target lambda tuning."""
    cfg.validate()
    sources, target, gold = _load(manifest)
    gold = _require_gold(gold)
    base = RngStream(cfg.seed, "baseline")
    rows: list[dict] = []

    per_source: list[dict] = []
    for s in sources:
        model, _ = ss.fit_single_source(s, target, 0.0, cfg, base.child(f"source_only/{s.name}"))
        per_source.append(_single_row(f"source-only/{s.name}", model, s.name, target, gold.labels))
    rows.extend(per_source)
    best = max(per_source, key=lambda r: r["f1"])
    rows.append(
        {
            **{k: best[k] for k in ("f1", "precision", "recall", "per_domain", "average")},
            "method": "source-only-best[oracle-selected]",
            "extras": {"chosen_source": next(iter(best["per_domain"]))},
        }
    )

    pooled = _pool_sources(sources)
    model, _ = ss.fit_single_source(pooled, target, 0.0, cfg, base.child("combined"))
    rows.append(_single_row("source-combined", model, pooled.name, target, gold.labels))

    if costs is None:
        costs = rel.compute_costs(sources, target, cfg)
    ids, names = list(target.ids), [s.name for s in sources]
    for lam in cfg.grid:
        plan = _fixed_plan(sources, lam, cfg)
        q = rel.compute_capacities(sources, target, plan, cfg)
        table = rel.assemble(ids, names, costs, q)
        model_j, _ = tr.train_cepc(sources, target, plan, table, cfg)
        rows.append(
            _joint_row(f"fixed-lambda/{lam:g}", model_j, target, gold.labels, {"lambda": lam})
        )

    chosen = meta_target_lambdas(sources, cfg)
    plan = _grouped_plan(sources, chosen, cfg)
    q = rel.compute_capacities(sources, target, plan, cfg)
    table = rel.assemble(ids, names, costs, q)
    model_m, _ = tr.train_cepc(sources, target, plan, table, cfg)
    rows.append(
        _joint_row(
            "meta-target", model_m, target, gold.labels,
            {"chosen_lambdas": dict(sorted(chosen.items()))},
        )
    )
    return rows


def run_ablations(
    manifest,
    cfg: TrainConfig,
    *,
    plan: co.CoordinationPlan | None = None,
    costs: np.ndarray | None = None,
    q: np.ndarray | None = None,
) -> list[dict]:
    """Three rows: drop the pairing terms entirely, score by cost only, score
    by capacity only. Cached plan/costs/capacities skip recomputation."""
    cfg.validate()
    sources, target, gold = _load(manifest)
    gold = _require_gold(gold)
    if plan is None:
        plan = co.coordinate(sources, target, cfg)
    if costs is None:
        costs = rel.compute_costs(sources, target, cfg)
    if q is None:
        q = rel.compute_capacities(sources, target, plan, cfg)
    ids, names = list(target.ids), [s.name for s in sources]

    rows = []
    table_full = rel.assemble(ids, names, costs, q)
    model_a, _ = tr.train_cepc(
        sources, target, plan, table_full, replace(cfg, alpha0=0.0, medium_enabled=False)
    )
    rows.append(_joint_row("ablation/no-paired-classifier", model_a, target, gold.labels))

    for method, mode in (
        ("ablation/no-classifier-capacity", "cost_only"),
        ("ablation/no-transformation-cost", "capacity_only"),
    ):
        table = rel.assemble(ids, names, costs, q, mode)
        model_x, _ = tr.train_cepc(sources, target, plan, table, cfg)
        rows.append(_joint_row(method, model_x, target, gold.labels, {"score_mode": mode}))
    return rows


def render_report(reports: Sequence[MetricsReport]) -> tuple[str, dict]:
    """Aggregate reports (one per seed) into an aligned text table and a
    machine document. Method order follows first appearance; no timestamps."""
    if not reports:
        raise ConfigError("render_report needs at least one report")
    order: list[str] = []
    by_method: dict[str, list[dict]] = {}
    for rep in reports:
        for row in rep.rows:
            name = row["method"]
            if name not in by_method:
                by_method[name] = []
                order.append(name)
            by_method[name].append(row)

    methods: dict[str, dict] = {}
    for name in order:
        entry: dict = {"runs": len(by_method[name])}
        for key in METRIC_KEYS:
            vals = [row[key] for row in by_method[name]]
            entry[key] = {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
                "values": vals,
            }
        methods[name] = entry

    doc = {
        "methods": methods,
        "method_order": order,
        "seeds": [rep.metadata.get("seed") for rep in reports],
        "runs": [rep.to_dict() for rep in reports],
    }

    headers = ["method", "f1", "precision", "recall", "runs"]
    lines = []
    for name in order:
        entry = methods[name]
        cells = [name]
        cells += [
            f"{entry[key]['mean']:.4f} ± {entry[key]['std']:.2f}" for key in METRIC_KEYS
        ]
        cells.append(str(entry["runs"]))
        lines.append(cells)
    widths = [max(len(headers[c]), *(len(row[c]) for row in lines)) for c in range(len(headers))]
    def fmt(cells):
        return "  ".join(cell.ljust(widths[c]) for c, cell in enumerate(cells)).rstrip()
    text = "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines])
    return text + "\n", doc


def reports_from_json(doc: dict) -> list[MetricsReport]:
    if not isinstance(doc, dict) or "runs" not in doc:
        raise DataError("rendered document needs a 'runs' list")
    return [MetricsReport.from_dict(run) for run in doc["runs"]]


def run_bench(
    manifest,
    cfg: TrainConfig,
    n_seeds: int,
    out_dir: str | Path,
    *,
    baselines: bool = False,
    ablations: bool = False,
) -> tuple[str, dict]:
    """Repeat the pipeline over seeds cfg.seed .. cfg.seed+n_seeds-1 and
    aggregate. Writes per-seed artifacts plus report.json / report.txt."""
    if n_seeds < 1:
        raise ConfigError(f"need at least one seed, got {n_seeds}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i in range(n_seeds):
        run_cfg = cfg.with_seed(cfg.seed + i)
        reports.append(
            run_pipeline(
                manifest,
                run_cfg,
                out / f"seed{run_cfg.seed}",
                baselines=baselines,
                ablations=ablations,
            )
        )
    text, doc = render_report(reports)
    (out / "report.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "report.txt").write_text(text, encoding="utf-8")
    return text, doc
