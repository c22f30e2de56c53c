"""Training loop: in-batch candidate construction, dual-stage objective and
a decoupled-weight-decay adaptive optimizer with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import InputError, TrainingAbort
from .losses import (
    LossReport,
    combined_loss,
    contrastive_loss,
    focused_ce_loss_batch,
)
from .model import RetrievalModel
from .ops import GROUP_FUSION, ParameterSet
from .pipeline import stage1_order
from .rng import RandomStream
from .tensor import Tensor, take


@dataclass
class Batch:
    """Index-aligned text/video pairs."""

    texts: np.ndarray     # (B, M) token ids
    videos: np.ndarray    # (B, T, P^2, D)
    item_ids: np.ndarray  # (B,) dataset indices, for diagnostics

    def __len__(self) -> int:
        return len(self.item_ids)


@dataclass
class LossBundle:
    """Loss tensors of one forward pass (kept for backward).

    `scale_calibration` lives outside the combined objective: it is the
    cross-entropy of the composed scores (stage-1 + delta) over detached
    inputs, so its gradient touches only the delta scale. The spec's focused
    loss reads the raw logits and therefore leaves the scale without any
    gradient; this term calibrates it toward values that make the composed
    re-ranking put the true candidate first.
    """

    t2v: Tensor
    v2t: Tensor
    focus_t: Tensor
    focus_v: Tensor
    combined_tensor: Tensor
    scale_calibration: Tensor | None = None

    def report(self) -> LossReport:
        return LossReport(
            float(self.t2v.data),
            float(self.v2t.data),
            float(self.focus_t.data),
            float(self.focus_v.data),
            float(self.combined_tensor.data),
        )


def build_candidates(scores: np.ndarray, true_index: int, k: int) -> tuple[np.ndarray, int]:
    """Top-k in-batch candidates with the true item force-included.

    When the true item misses the top-k it replaces the lowest-ranked
    candidate. Returns (candidate indices, position of the true item).
    """
    top = stage1_order(scores)[:k]
    where = np.nonzero(top == true_index)[0]
    if where.size:
        return top, int(where[0])
    top = top.copy()
    top[-1] = true_index
    return top, k - 1


def training_loss(
    model: RetrievalModel,
    batch: Batch,
    cfg: RunConfig,
    rng: RandomStream | None = None,
    deterministic: bool = False,
) -> LossBundle:
    """Forward pass of one step: both contrastive terms plus both focused
    cross-entropy terms over injected in-batch candidate sets."""
    b = len(batch)
    if b < 2:
        raise InputError("training batch must have at least 2 pairs")
    k_train = cfg.resolved_k_train(b)

    t_global, t_focus, t_locals = model.encode_text_batch(batch.texts)
    v_global, v_focus, v_locals = model.encode_video_batch(batch.videos)

    tau = model.temperature
    l_t2v = contrastive_loss(t_global, v_global, tau, "t2v")
    l_v2t = contrastive_loss(t_global, v_global, tau, "v2t")

    if cfg.use_query_indicators:
        sims = t_global.data @ v_global.data.T
        l_focus_t, cal_t = _focused_direction(
            model, t_focus, v_locals, sims, k_train, rng, deterministic, "t"
        )
        l_focus_v, cal_v = _focused_direction(
            model, v_focus, t_locals, sims.T, k_train, rng, deterministic, "v"
        )
        calibration = cal_t + cal_v
    else:
        l_focus_t = Tensor(0.0)
        l_focus_v = Tensor(0.0)
        calibration = None

    combined = combined_loss(l_t2v, l_v2t, l_focus_v, l_focus_t)
    return LossBundle(l_t2v, l_v2t, l_focus_t, l_focus_v, combined, calibration)


def _focused_direction(model, query_focus, cand_locals, sims, k_train, rng, deterministic, tag):
    b = sims.shape[0]
    cand_idx = np.empty((b, k_train), dtype=np.int64)
    positions = np.empty(b, dtype=np.int64)
    for i in range(b):
        cand_idx[i], positions[i] = build_candidates(sims[i], i, k_train)
    gathered = take(cand_locals, cand_idx)  # (B, k_train, n, C)
    tokens = model.fusion.candidate_tokens(gathered, k_train)
    noise_rng = rng.child("gumbel", tag) if rng is not None else None
    fused = model.fusion.fuse(
        query_focus, tokens, rng=noise_rng, deterministic=deterministic
    )
    logits, deltas = model.fusion.project(fused)
    focus = focused_ce_loss_batch(logits[:, :k_train], positions)
    # Calibration of the delta scale over detached logits and stage-1 scores:
    # cross-entropy of the composed candidate scores, gradient on the scale only.
    scale = model.fusion.params["fusion.delta_scale"]
    stage1 = Tensor(np.take_along_axis(sims, cand_idx, axis=1))
    composed = stage1 + scale * logits[:, :k_train].detach()
    calibration = focused_ce_loss_batch(composed, positions)
    return focus, calibration


class AdamW:
    """Adaptive-moment update with decoupled weight decay and per-group rates.

    The learnable log-temperature is exempt from weight decay (decaying it
    would silently drag tau toward 1).
    """

    def __init__(
        self,
        params: ParameterSet,
        lr_base: float,
        lr_fusion: float,
        weight_decay: float = 0.2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.rates = {"base": lr_base, "fusion": lr_fusion}
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.rates[self.params.group(name)]
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and name != "log_temperature":
                update = update + self.weight_decay * tensor.data
            tensor.data = tensor.data - lr * update


def train_step(
    model: RetrievalModel,
    batch: Batch,
    cfg: RunConfig,
    optimizer: AdamW,
    rng: RandomStream,
    deterministic: bool = False,
) -> LossReport:
    """One optimizer update; aborts with diagnostics on a non-finite loss."""
    bundle = training_loss(model, batch, cfg, rng=rng, deterministic=deterministic)
    report = bundle.report()
    if not report.finite():
        raise TrainingAbort(
            f"non-finite loss {report} on batch items {batch.item_ids.tolist()}"
        )
    model.params.zero_grad()
    bundle.combined_tensor.backward()
    if bundle.scale_calibration is not None:
        bundle.scale_calibration.backward()
    optimizer.step()
    model.params.zero_grad()
    return report


@dataclass
class StepLog:
    epoch: int
    step: int
    report: LossReport


def iterate_batches(dataset, order: np.ndarray, batch_size: int):
    """Slice a shuffled dataset into batches; a trailing batch of one pair is
    dropped (contrastive training needs at least two)."""
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield Batch(dataset.texts[idx], dataset.videos[idx], idx)


def shuffle_cohorts(groups: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Seeded epoch shuffle that keeps hard-negative cohorts contiguous.

    Cohort order and the member order inside each cohort are both permuted,
    so batches contain whole cohorts and the focused head trains against the
    distractors it has to separate at evaluation time. A plain item shuffle
    would almost never co-locate cohort members within a batch.
    """
    labels = np.unique(groups)
    cohort_perm = rng.child("cohorts").permutation(len(labels))
    pieces = []
    for rank, which in enumerate(cohort_perm):
        members = np.nonzero(groups == labels[which])[0]
        inner = rng.child("members", rank).permutation(len(members))
        pieces.append(members[inner])
    return np.concatenate(pieces)


def train_loop(
    dataset,
    model: RetrievalModel,
    cfg: RunConfig,
    out_dir=None,
    deterministic: bool = False,
) -> list[StepLog]:
    """Seeded epochs of train_step; emits a checkpoint per epoch when out_dir
    is given and returns the per-step loss log."""
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    stream = RandomStream(cfg.seed).child("train")
    optimizer = AdamW(
        model.params, cfg.lr_base, cfg.lr_fusion, weight_decay=cfg.weight_decay
    )
    logs: list[StepLog] = []
    for epoch in range(cfg.epochs):
        order = shuffle_cohorts(dataset.groups, stream.child("shuffle", epoch))
        for step, batch in enumerate(iterate_batches(dataset, order, cfg.batch_size)):
            report = train_step(
                model,
                batch,
                cfg,
                optimizer,
                stream.child("step", epoch, step),
                deterministic=deterministic,
            )
            logs.append(StepLog(epoch, step, report))
        if out_dir is not None:
            model.save(f"{out_dir}/checkpoint_epoch_{epoch}.bin")
    return logs
