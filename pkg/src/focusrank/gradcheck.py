"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .ops import ParameterSet
from .tensor import Tensor


@dataclass
class GradCheckResult:
    """Max relative error between tape and central-difference gradients."""

    name: str
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(
    loss_fn,
    params: ParameterSet,
    eps: float = 1e-5,
    param_names: list[str] | None = None,
    name: str = "loss",
) -> GradCheckResult:
    """Compare tape gradients of `loss_fn()` against central finite differences.

    `loss_fn` must rebuild the forward computation from the current parameter
    values and return a scalar Tensor. Relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise UsageError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise UsageError("loss_fn must return a scalar Tensor")
    loss.backward()
    analytic = params.gradients()
    names = param_names if param_names is not None else params.names()

    per_param: dict[str, float] = {}
    for pname in names:
        tensor = params[pname]
        a = analytic[pname]
        worst = 0.0
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a_i = a.reshape(-1)[i]
            denom = max(abs(a_i), abs(numeric), 1e-8)
            worst = max(worst, abs(a_i - numeric) / denom)
        per_param[pname] = worst
    params.zero_grad()
    worst_param = max(per_param, key=per_param.get) if per_param else ""
    max_err = per_param.get(worst_param, 0.0)
    return GradCheckResult(name, max_err, worst_param, per_param)


def run_gradient_suite(seed: int = 0, eps: float = 1e-5) -> list[GradCheckResult]:
    """Gradient-check every differentiable operation on toy shapes.

    Covers indicator binding, fused cross-attention, the MLP head, both
    contrastive directions, the focused cross-entropy, and the combined
    training objective of a miniature end-to-end model (width 8, batch 2,
    3 re-rank candidates).
    """
    # Local imports: the suite exercises higher-level modules that themselves
    # depend on this one.
    from . import losses
    from .config import default_config
    from .encoders import bind_query_indicators
    from .model import RetrievalModel
    from .ops import Mlp, kaiming_normal, scaled_dot_attention
    from .rng import RandomStream
    from .training import Batch, training_loss

    rng = RandomStream(seed).child("gradcheck")
    results = []

    def sum_of_squares(t: Tensor) -> Tensor:
        return (t * t).sum()

    # Indicator binding: residual cross-attention with an output projection.
    p = ParameterSet()
    ind = p.add("indicators", kaiming_normal(rng.child("bind", "ind"), (4, 8), 8))
    tok = p.add("tokens", kaiming_normal(rng.child("bind", "tok"), (6, 8), 8))
    w_o = p.add("out_w", kaiming_normal(rng.child("bind", "w"), (8, 8), 8))
    b_o = p.add("out_b", rng.child("bind", "b").normal(8, scale=0.1))
    results.append(
        check_gradients(
            lambda: sum_of_squares(bind_query_indicators(ind, tok, w_o, b_o)),
            p,
            eps,
            name="binding-attention",
        )
    )

    # Fused cross-attention with the gumbel temperature path active.
    p = ParameterSet()
    q = p.add("q", kaiming_normal(rng.child("fuse", "q"), (3, 8), 8))
    kv = p.add("kv", kaiming_normal(rng.child("fuse", "kv"), (5, 8), 8))
    results.append(
        check_gradients(
            lambda: sum_of_squares(
                scaled_dot_attention(q, kv, kv, use_gumbel=True, gumbel_temp=0.7)
            ),
            p,
            eps,
            name="fusion-attention",
        )
    )

    # MLP head.
    p = ParameterSet()
    x = p.add("x", rng.child("mlp", "x").normal(8))
    mlp = Mlp(p, "mlp", 8, 16, 3, rng.child("mlp"))
    results.append(
        check_gradients(lambda: sum_of_squares(mlp(x)), p, eps, name="mlp-head")
    )

    # Contrastive losses over raw (graph-normalized) globals, both directions.
    p = ParameterSet()
    tg = p.add("text", kaiming_normal(rng.child("nce", "t"), (2, 8), 8))
    vg = p.add("video", kaiming_normal(rng.child("nce", "v"), (2, 8), 8))
    log_temp = p.add("log_temp", np.log(0.07))
    for direction in ("t2v", "v2t"):
        results.append(
            check_gradients(
                lambda d=direction: losses.contrastive_loss(
                    losses.normalize_rows(tg),
                    losses.normalize_rows(vg),
                    log_temp.exp(),
                    d,
                ),
                p,
                eps,
                name=f"contrastive-{direction}",
            )
        )

    # Focused cross-entropy.
    p = ParameterSet()
    logits = p.add("logits", rng.child("ce").normal(3))
    results.append(
        check_gradients(
            lambda: losses.focused_ce_loss(logits, 1), p, eps, name="focused-ce"
        )
    )

    # Combined objective through the full miniature model.
    cfg = default_config()
    cfg.dim = 8
    cfg.layers = 1
    cfg.vocab_size = 16
    cfg.text_len = 4
    cfg.max_text_len = 4
    cfg.patch_count = 4
    cfg.patch_dim = 8
    cfg.frame_count = 2
    cfg.max_frames = 2
    cfg.mlp_hidden = 8
    cfg.latent_dim = 4
    cfg.k = 3
    cfg.k_train = 2
    cfg.batch_size = 2
    cfg.validate()
    model = RetrievalModel(cfg, seed=seed)
    # Randomize the residual projections and delta scale so every gradient
    # path is exercised away from its zero-initialized point.
    for pname in model.params.names():
        if pname.endswith(("out_w", "out_b", "delta_scale")):
            t = model.params[pname]
            t.data = rng.child("jitter", pname).normal(t.data.shape, scale=0.3)
    data_rng = rng.child("batch")
    batch = Batch(
        texts=np.asarray(data_rng.integers(0, cfg.vocab_size, (2, cfg.text_len))),
        videos=data_rng.normal((2, cfg.frame_count, cfg.patch_count, cfg.patch_dim)),
        item_ids=np.arange(2),
    )
    results.append(
        check_gradients(
            lambda: training_loss(model, batch, cfg, deterministic=True).combined_tensor,
            model.params,
            eps,
            name="combined-objective",
        )
    )
    return results
