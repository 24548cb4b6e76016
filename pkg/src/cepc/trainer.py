"""Joint training of coordinated encoders with paired classifiers.

One encoder per coordination group, one classifier per source, and (optionally)
one medium head per encoder group. Each step draws a shared target batch plus a
balanced batch per source, then assembles

    L = sum_i [ NLL_i + lambda_i * CORAL_i ] + alpha * L_div + L_med

where alpha decays linearly to exactly zero on the final step. Gradient
accumulation follows a fixed order (alignment terms per source, then
divergence, then medium, then the per-group target backward pass) so runs are
bit-reproducible. With alpha0 = 0, medium heads off, and singleton groups, a
joint run is bit-identical to training each source on its own.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .coordination import CoordinationPlan
from .data import DomainDataset
from .errors import ConfigError, DataError, FormatError, TrainingError
from .losses import divergence_loss, divergence_psi, medium_loss
from .nn import Mlp, adam_step, init_adam, init_params, mlp_backward, mlp_forward
from .reliability import ReliabilityTable
from .rng import RngStream
from .single_source import N_CLASSES, balanced_batch, source_term_grads, steps_per_epoch

CHECKPOINT_MAGIC = b"CEPC"
CHECKPOINT_VERSION = 1

TRACE_FIELDS = ("step", "nll", "coral", "l_div", "l_med", "alpha", "total")


def alpha_schedule(step: int, total_steps: int, alpha0: float) -> float:
    """Linear decay; hits exactly zero at step == total_steps."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"bad schedule query: step {step} of {total_steps}")
    return alpha0 * (1.0 - step / total_steps)


@dataclass
class CepcModel:
    source_names: list[str]
    groups: list[list[str]]
    lambda_star: dict[str, float]
    encoders: list[Mlp]        # parallel to groups
    classifiers: list[Mlp]     # parallel to source_names
    mediums: list[Mlp] | None  # parallel to groups, None when heads are off

    def group_index(self) -> dict[str, int]:
        return {name: gid for gid, group in enumerate(self.groups) for name in group}

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for enc in self.encoders:
            out.extend(enc.parameters())
        for clf in self.classifiers:
            out.extend(clf.parameters())
        if self.mediums is not None:
            for med in self.mediums:
                out.extend(med.parameters())
        return out


@dataclass
class BatchPlan:
    """One step's index draws: balanced per-source batches plus the shared target batch."""

    source_indices: dict[str, np.ndarray]
    target_indices: np.ndarray


def draw_batch_plan(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    batch_size: int,
    src_gens: dict[str, np.random.Generator],
    tgt_gen: np.random.Generator,
) -> BatchPlan:
    bt = tgt_gen.integers(0, target.n, size=batch_size)
    picks = {
        s.name: balanced_batch(s.labels, batch_size, src_gens[s.name]) for s in sources
    }
    return BatchPlan(source_indices=picks, target_indices=bt)


def _check_alignment(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    plan: CoordinationPlan,
    table: ReliabilityTable,
) -> None:
    names = [s.name for s in sources]
    if len(names) < 2:
        raise ConfigError("joint training needs at least two sources")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate source names: {names}")
    if sorted(names) != sorted(plan.lambda_star):
        raise ConfigError(
            f"plan covers {sorted(plan.lambda_star)}, got sources {sorted(names)}"
        )
    grouped = sorted(n for g in plan.groups for n in g)
    if grouped != sorted(names):
        raise ConfigError("plan groups do not partition the sources")
    if table.sources != names:
        raise ConfigError(
            f"reliability columns {table.sources} do not match source order {names}"
        )
    if table.doc_ids != list(target.ids):
        raise DataError("reliability rows are not aligned with the target documents")
    for s in sources:
        if s.dim != target.dim:
            raise DataError(f"source {s.name} dim {s.dim} != target dim {target.dim}")


def init_cepc(
    sources: Sequence[DomainDataset], plan: CoordinationPlan, cfg: TrainConfig, root: RngStream
) -> CepcModel:
    """Fresh model; every stream label matches the standalone per-source run."""
    dim = sources[0].dim
    enc_w = cfg.encoder_width(dim)
    clf_w = cfg.classifier_width(dim)
    by_name = {s.name: s for s in sources}
    streams = {name: root.child(f"source/{name}") for name in by_name}
    encoders = [
        init_params([dim, enc_w], streams[group[0]].child("enc_init"),
                    final_activation="tanh", head="none")
        for group in plan.groups
    ]
    classifiers = [
        init_params([enc_w, clf_w, N_CLASSES], streams[s.name].child("clf_init"),
                    final_activation="linear", head="softmax")
        for s in sources
    ]
    mediums = None
    if cfg.medium_enabled:
        mediums = [
            init_params([enc_w, clf_w, N_CLASSES], streams[group[0]].child("med_init"),
                        final_activation="linear", head="softmax")
            for group in plan.groups
        ]
    return CepcModel(
        source_names=[s.name for s in sources],
        groups=[list(g) for g in plan.groups],
        lambda_star=dict(plan.lambda_star),
        encoders=encoders,
        classifiers=classifiers,
        mediums=mediums,
    )


def _accumulate(into: list[np.ndarray] | None, grads: list[np.ndarray]) -> list[np.ndarray]:
    if into is None:
        return list(grads)
    return [a + b for a, b in zip(into, grads)]


def train_cepc(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    plan: CoordinationPlan,
    table: ReliabilityTable,
    cfg: TrainConfig,
) -> tuple[CepcModel, list[dict]]:
    cfg.validate()
    for s in sources:
        s.validate()
    target.validate()
    _check_alignment(sources, target, plan, table)

    root = RngStream(cfg.seed, "train")
    model = init_cepc(sources, plan, cfg, root)
    gid_of = model.group_index()
    lams = [plan.lambda_star[s.name] for s in sources]
    params = model.parameters()
    adam = init_adam(params, lr=cfg.lr)
    src_gens = {
        s.name: root.child(f"source/{s.name}").child("src_batch").generator() for s in sources
    }
    tgt_gen = root.child("tgt_batch").generator()

    n_groups = len(model.groups)
    m = len(sources)
    spe = steps_per_epoch(max(s.n for s in sources), cfg.batch_size)
    total = spe * cfg.epochs
    trace: list[dict] = []

    for step in range(1, total + 1):
        alpha = alpha_schedule(step, total, cfg.alpha0)
        bp = draw_batch_plan(sources, target, cfg.batch_size, src_gens, tgt_gen)
        bt = bp.target_indices
        tgt_x = target.features[bt]
        tgt_traces = [mlp_forward(enc, tgt_x) for enc in model.encoders]
        tgt_up = [np.zeros_like(t.outputs) for t in tgt_traces]
        tgt_touched = [False] * n_groups
        enc_grads: list[list[np.ndarray] | None] = [None] * n_groups
        clf_grads: list[list[np.ndarray] | None] = [None] * m
        med_grads: list[list[np.ndarray] | None] = [None] * n_groups

        nll_total = 0.0
        coral_weighted = 0.0
        for i, source in enumerate(sources):
            gid = gid_of[source.name]
            bs = bp.source_indices[source.name]
            st = source_term_grads(
                model.encoders[gid],
                model.classifiers[i],
                source.features[bs],
                source.labels[bs],
                tgt_traces[gid],
                lams[i],
            )
            nll_total += st.nll
            coral_weighted += lams[i] * st.coral
            clf_grads[i] = _accumulate(clf_grads[i], st.clf_grads)
            enc_grads[gid] = _accumulate(enc_grads[gid], st.enc_src_grads)
            if st.tgt_upstream is not None:
                tgt_up[gid] += st.tgt_upstream
                tgt_touched[gid] = True

        l_div = 0.0
        l_med = 0.0
        need_target_probs = alpha != 0.0 or model.mediums is not None
        if need_target_probs:
            prob_traces = [
                mlp_forward(model.classifiers[i], tgt_traces[gid_of[s.name]].outputs)
                for i, s in enumerate(sources)
            ]
            class_probs = [t.outputs for t in prob_traces]
        if alpha != 0.0:
            psis = [
                divergence_psi(i, class_probs, table.indicator[bt, i]) for i in range(m)
            ]
            div = divergence_loss(psis)
            l_div = div.value
            for i in range(m):
                role = f"classifier_{i}"
                if role not in div.grads:
                    continue
                g_par, g_in = mlp_backward(
                    model.classifiers[i], prob_traces[i], alpha * div.grads[role]
                )
                clf_grads[i] = _accumulate(clf_grads[i], g_par)
                gid = gid_of[sources[i].name]
                tgt_up[gid] += g_in
                tgt_touched[gid] = True
        if model.mediums is not None:
            med_traces = [
                mlp_forward(med, tgt_traces[e].outputs) for e, med in enumerate(model.mediums)
            ]
            med = medium_loss([t.outputs for t in med_traces], class_probs)
            l_med = med.value
            for e in range(n_groups):
                g_par, g_in = mlp_backward(
                    model.mediums[e], med_traces[e], cfg.medium_weight * med.grads[f"medium_{e}"]
                )
                med_grads[e] = _accumulate(med_grads[e], g_par)
                tgt_up[e] += g_in
                tgt_touched[e] = True

        for e in range(n_groups):
            if tgt_touched[e]:
                g_par, _ = mlp_backward(model.encoders[e], tgt_traces[e], tgt_up[e])
                enc_grads[e] = _accumulate(enc_grads[e], g_par)

        total_loss = nll_total + coral_weighted + alpha * l_div + cfg.medium_weight * l_med
        if not math.isfinite(total_loss):
            raise TrainingError(
                f"non-finite loss at step {step}: nll={nll_total} coral={coral_weighted} "
                f"div={l_div} med={l_med}"
            )

        flat_grads: list[np.ndarray] = []
        for e in range(n_groups):
            flat_grads.extend(enc_grads[e])
        for i in range(m):
            flat_grads.extend(clf_grads[i])
        if model.mediums is not None:
            for e in range(n_groups):
                flat_grads.extend(med_grads[e])
        adam_step(params, flat_grads, adam)
        trace.append(
            {
                "step": step,
                "nll": nll_total,
                "coral": coral_weighted,
                "l_div": l_div,
                "l_med": l_med,
                "alpha": alpha,
                "total": total_loss,
            }
        )
    return model, trace


def predict_probs_per_source(model: CepcModel, features: np.ndarray) -> np.ndarray:
    """Stacked per-source class probabilities, shape (M, n, 2)."""
    gid_of = model.group_index()
    encoded = [mlp_forward(enc, features).outputs for enc in model.encoders]
    out = [
        mlp_forward(model.classifiers[i], encoded[gid_of[name]]).outputs
        for i, name in enumerate(model.source_names)
    ]
    return np.stack(out, axis=0)


def majority_vote(probs_stack: np.ndarray) -> np.ndarray:
    """Per-document vote over sources; ties fall back to the mean probability."""
    probs_stack = np.asarray(probs_stack)
    if probs_stack.ndim != 3:
        raise ConfigError(f"expected (M, n, classes) probabilities, got {probs_stack.shape}")
    votes = probs_stack.argmax(axis=2)
    m = probs_stack.shape[0]
    ones = votes.sum(axis=0)
    labels = (ones * 2 > m).astype(np.int8)
    tie = ones * 2 == m
    if tie.any():
        labels[tie] = probs_stack[:, tie, :].mean(axis=0).argmax(axis=1).astype(np.int8)
    return labels


@dataclass
class Prediction:
    labels: np.ndarray      # (n,) final majority labels
    votes: np.ndarray       # (M, n) each source classifier's own argmax
    mean_probs: np.ndarray  # (n, 2) softmax probabilities averaged over sources


def predict_details(model: CepcModel, features: np.ndarray) -> Prediction:
    stack = predict_probs_per_source(model, features)
    return Prediction(
        labels=majority_vote(stack),
        votes=stack.argmax(axis=2).astype(np.int8),
        mean_probs=stack.mean(axis=0),
    )


def predict_majority(model: CepcModel, features: np.ndarray) -> np.ndarray:
    return predict_details(model, features).labels


def save_trace(trace: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow(
                [row["step"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]]
            )


def _module_specs(model: CepcModel) -> list[dict]:
    specs = []
    for gid, enc in enumerate(model.encoders):
        specs.append(
            {
                "kind": "encoder",
                "group": gid,
                "dims": [enc.in_dim] + [w.shape[1] for w in enc.weights],
                "final_activation": enc.activations[-1],
                "head": enc.head,
            }
        )
    for i, clf in enumerate(model.classifiers):
        specs.append(
            {
                "kind": "classifier",
                "source": model.source_names[i],
                "dims": [clf.in_dim] + [w.shape[1] for w in clf.weights],
                "final_activation": clf.activations[-1],
                "head": clf.head,
            }
        )
    if model.mediums is not None:
        for gid, med in enumerate(model.mediums):
            specs.append(
                {
                    "kind": "medium",
                    "group": gid,
                    "dims": [med.in_dim] + [w.shape[1] for w in med.weights],
                    "final_activation": med.activations[-1],
                    "head": med.head,
                }
            )
    return specs


def _modules(model: CepcModel) -> list[Mlp]:
    out = list(model.encoders) + list(model.classifiers)
    if model.mediums is not None:
        out.extend(model.mediums)
    return out


def save_checkpoint(model: CepcModel, path: str | Path) -> None:
    header = {
        "source_names": model.source_names,
        "groups": model.groups,
        "lambda_star": model.lambda_star,
        "has_mediums": model.mediums is not None,
        "modules": _module_specs(model),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for module in _modules(model):
            for tensor in module.parameters():
                raw = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)


def _blank_mlp(spec: dict) -> Mlp:
    dims = [int(d) for d in spec["dims"]]
    weights = [np.zeros((a, b), dtype=np.float32) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b, dtype=np.float32) for b in dims[1:]]
    activations = ["tanh"] * (len(weights) - 1) + [str(spec["final_activation"])]
    return Mlp(weights=weights, biases=biases, activations=activations, head=str(spec["head"]))


def load_checkpoint(path: str | Path) -> CepcModel:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: malformed checkpoint header ({e})") from e
    try:
        specs = header["modules"]
        modules = [_blank_mlp(spec) for spec in specs]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad module specs ({e})") from e
    for module in modules:
        for tensor in module.parameters():
            (nbytes,) = struct.unpack("<I", take(4, "tensor length"))
            if nbytes != tensor.nbytes:
                raise FormatError(
                    f"{path}: tensor block of {nbytes} bytes, expected {tensor.nbytes}"
                )
            tensor[...] = np.frombuffer(take(nbytes, "tensor"), dtype="<f4").reshape(
                tensor.shape
            )
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    encoders = [m for spec, m in zip(specs, modules) if spec["kind"] == "encoder"]
    classifiers = [m for spec, m in zip(specs, modules) if spec["kind"] == "classifier"]
    mediums = [m for spec, m in zip(specs, modules) if spec["kind"] == "medium"]
    if not header.get("has_mediums", False):
        mediums_out = None
    else:
        mediums_out = mediums
    model = CepcModel(
        source_names=[str(n) for n in header["source_names"]],
        groups=[[str(n) for n in g] for g in header["groups"]],
        lambda_star={str(k): float(v) for k, v in header["lambda_star"].items()},
        encoders=encoders,
        classifiers=classifiers,
        mediums=mediums_out,
    )
    if len(model.encoders) != len(model.groups) or len(model.classifiers) != len(
        model.source_names
    ):
        raise FormatError(f"{path}: module list does not match the declared layout")
    return model
