"""Single-source training: one encoder, one classifier, NLL + lambda * CORAL.

The per-source gradient math here is also the per-source slice of the full
multi-source step, so the combined trainer and an isolated run walk the same
float operations in the same order. That is what makes the decoupled
equivalence (alpha0 = 0, medium heads off, singleton groups) hold bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import DomainDataset
from .errors import DataError, DegenerateBatchError, TrainingError
from .losses import coral_loss
from .nn import AdamState, Mlp, adam_step, init_adam, init_params, mlp_backward, mlp_forward, softmax_nll
from .rng import RngStream

N_CLASSES = 2


@dataclass
class SingleSourceModel:
    encoder: Mlp
    classifier: Mlp

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.classifier.parameters()


def balanced_batch(labels: np.ndarray, batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """Index batch with batch_size/2 draws per class, with replacement."""
    if batch_size < 2 or batch_size % 2 != 0:
        raise DegenerateBatchError(f"batch_size must be even and >= 2, got {batch_size}")
    labels = np.asarray(labels)
    half = batch_size // 2
    parts = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            raise DataError(f"cannot balance a batch: class {cls} is empty")
        parts.append(idx[gen.integers(0, idx.size, size=half)])
    return np.concatenate(parts)


def init_single_source(feature_dim: int, cfg: TrainConfig, rng: RngStream) -> SingleSourceModel:
    enc_w = cfg.encoder_width(feature_dim)
    clf_w = cfg.classifier_width(feature_dim)
    encoder = init_params(
        [feature_dim, enc_w], rng.child("enc_init"), final_activation="tanh", head="none"
    )
    classifier = init_params(
        [enc_w, clf_w, N_CLASSES], rng.child("clf_init"), final_activation="linear", head="softmax"
    )
    return SingleSourceModel(encoder=encoder, classifier=classifier)


@dataclass
class SourceStep:
    """Per-source gradient pieces for one step."""

    nll: float
    coral: float
    clf_grads: list[np.ndarray]
    enc_src_grads: list[np.ndarray]
    tgt_upstream: np.ndarray | None  # lambda-scaled CORAL grad wrt target encodings


def source_term_grads(
    encoder: Mlp,
    classifier: Mlp,
    src_x: np.ndarray,
    src_y: np.ndarray,
    tgt_trace,
    lam: float,
) -> SourceStep:
    """Classification + alignment gradients for one source on one batch.

    tgt_trace is the encoder's forward trace on the shared target batch; its
    backward pass is left to the caller so several consumers can accumulate
    into it. When lam == 0 the CORAL term is skipped entirely and contributes
    exactly nothing.
    """
    src_trace = mlp_forward(encoder, src_x)
    clf_trace = mlp_forward(classifier, src_trace.outputs)
    nll, g_logits = softmax_nll(clf_trace.logits, src_y)
    clf_grads, g_enc_out = mlp_backward(classifier, clf_trace, g_logits, wrt_logits=True)
    if lam != 0.0:
        cor = coral_loss(src_trace.outputs, tgt_trace.outputs)
        coral_value = cor.value
        up_src = g_enc_out + lam * cor.grads["source"]
        tgt_upstream = lam * cor.grads["target"]
    else:
        coral_value = 0.0
        up_src = g_enc_out
        tgt_upstream = None
    enc_src_grads, _ = mlp_backward(encoder, src_trace, up_src)
    return SourceStep(
        nll=nll,
        coral=coral_value,
        clf_grads=clf_grads,
        enc_src_grads=enc_src_grads,
        tgt_upstream=tgt_upstream,
    )


def steps_per_epoch(n_docs: int, batch_size: int) -> int:
    return math.ceil(n_docs / batch_size)


def fit_single_source(
    source: DomainDataset,
    target: DomainDataset,
    lam: float,
    cfg: TrainConfig,
    rng: RngStream,
    *,
    tgt_batch_rng: RngStream | None = None,
    total_steps: int | None = None,
) -> tuple[SingleSourceModel, list[dict]]:
    """Train a fresh encoder+classifier; returns (model, per-step loss trace)."""
    cfg.validate()
    source.validate()
    target.validate()
    if source.dim != target.dim:
        raise DataError(f"source dim {source.dim} != target dim {target.dim}")
    model = init_single_source(source.dim, cfg, rng)
    params = model.parameters()
    adam = init_adam(params, lr=cfg.lr)
    src_gen = rng.child("src_batch").generator()
    tgt_gen = (tgt_batch_rng or rng.child("tgt_batch")).generator()
    total = total_steps or steps_per_epoch(source.n, cfg.batch_size) * cfg.epochs
    trace: list[dict] = []
    for step in range(1, total + 1):
        bs = balanced_batch(source.labels, cfg.batch_size, src_gen)
        bt = tgt_gen.integers(0, target.n, size=cfg.batch_size)
        tgt_trace = mlp_forward(model.encoder, target.features[bt])
        st = source_term_grads(
            model.encoder, model.classifier, source.features[bs], source.labels[bs], tgt_trace, lam
        )
        if st.tgt_upstream is not None:
            enc_tgt_grads, _ = mlp_backward(model.encoder, tgt_trace, st.tgt_upstream)
            enc_grads = [a + b for a, b in zip(st.enc_src_grads, enc_tgt_grads)]
        else:
            enc_grads = st.enc_src_grads
        total_loss = st.nll + lam * st.coral
        if not math.isfinite(total_loss):
            raise TrainingError(f"non-finite loss at step {step}: nll={st.nll} coral={st.coral}")
        adam_step(params, enc_grads + st.clf_grads, adam)
        trace.append({"step": step, "nll": st.nll, "coral": st.coral, "total": total_loss})
    return model, trace


def encode(model: SingleSourceModel, features: np.ndarray) -> np.ndarray:
    return mlp_forward(model.encoder, features).outputs


def predict_probs(model: SingleSourceModel, features: np.ndarray) -> np.ndarray:
    return mlp_forward(model.classifier, encode(model, features)).outputs
