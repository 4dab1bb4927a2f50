"""Losses, optimizer, low-rank adapters, and the training loop.

The objective is a contrastive loss over in-batch negatives plus a weighted
alignment term that pulls the embedding of an image-dropped input toward the
embedding of the same input with its image (softmax-distribution
cross-entropy over embedding dimensions, teacher side detached by default).
Sides that never had an image contribute exactly zero to the alignment term.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import PairRecord
from .errors import ContractError, TrainingDiverged
from .model import Adapter, CompletionEmbedder, drop_image
from .seeding import substream


@dataclass
class LossConfig:
    temperature: float = 0.02
    aux_weight: float = 0.2
    aux_temp: float = 0.1
    stop_grad_target: bool = True

    def __post_init__(self):
        if self.temperature <= 0 or self.aux_temp <= 0:
            raise ContractError("temperatures must be positive")
        if self.aux_weight < 0:
            raise ContractError("aux_weight must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 for in-batch negatives")


@dataclass
class AdapterConfig:
    rank: int = 8
    scaling: float = 1.0
    # Substring patterns; a 2-D weight is adapted when any pattern occurs in
    # its name. Defaults cover attention, mlp, projector, and token-embedding
    # matrices; position tables and the patch pool stay frozen.
    targets: tuple[str, ...] = ("attn.", "mlp.", "proj", "patch_embed", "tok_emb")

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("adapter rank must be >= 1")
        if not self.targets:
            raise ContractError("adapter config needs at least one target pattern")


def _check_unit_rows(x: Tensor, what: str, tol: float = 1e-3) -> None:
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    worst = float(np.abs(norms - 1.0).max())
    if worst > tol:
        raise ContractError(f"{what} rows must be unit-norm within {tol} (off by {worst:.3e})")


def info_nce(query_embs: Tensor, target_embs: Tensor, temperature: float) -> Tensor:
    """Contrastive loss with in-batch negatives. (B, d), (B, d) -> scalar.

    Row i's positive is row i of the targets; every other row is a negative.
    A batch of one has no negatives and the loss is exactly zero.
    """
    if query_embs.ndim != 2 or query_embs.shape != target_embs.shape:
        raise ContractError(
            f"need matching (B, d) embedding matrices, got {query_embs.shape} vs {target_embs.shape}"
        )
    _check_unit_rows(query_embs, "query embedding")
    _check_unit_rows(target_embs, "target embedding")
    scores = ad.scale(ad.matmul(query_embs, ad.transpose(target_embs)), 1.0 / temperature)
    return ad.mean(ad.sub(ad.logsumexp(scores), ad.diag_part(scores)))


def alignment_terms(real_embs: Tensor, completed_embs: Tensor, loss_cfg: LossConfig) -> Tensor:
    """Per-row cross-entropy between softmax distributions over dimensions.

    (m, d), (m, d) -> (m,). The real side is the teacher; with
    stop_grad_target it is detached, so only the completed side learns.
    """
    if real_embs.shape != completed_embs.shape:
        raise ContractError(f"embedding shapes disagree: {real_embs.shape} vs {completed_embs.shape}")
    inv_t = 1.0 / loss_cfg.aux_temp
    teacher_logits = ad.scale(ad.stop_gradient(real_embs) if loss_cfg.stop_grad_target else real_embs, inv_t)
    return ad.softmax_cross_entropy_rows(ad.scale(completed_embs, inv_t), ad.softmax(teacher_logits))


def aux_loss(pairs: Sequence[PairRecord], model: CompletionEmbedder, loss_cfg: LossConfig,
             query_embs: Tensor | None = None, target_embs: Tensor | None = None) -> Tensor:
    """Alignment loss over both sides of a batch, averaged by batch size.

    Only sides that carry an image contribute: their image-dropped variant is
    re-embedded through the completion route and pulled toward the original.
    An image-free batch returns exactly 0.0.
    """
    if not pairs:
        raise ContractError("aux_loss of an empty batch")
    batch = len(pairs)
    total: Tensor | None = None
    for side, embs in (("query", query_embs), ("target", target_embs)):
        items = [getattr(r, "query" if side == "query" else "positive_target") for r in pairs]
        idx = [i for i, item in enumerate(items) if item.image is not None]
        if not idx:
            continue
        if embs is None:
            embs = model.embed_batch(items)
        real = ad.take(embs, np.asarray(idx, dtype=np.int64))
        completed = model.embed_batch([drop_image(items[i]) for i in idx])
        terms = ad.sum_(alignment_terms(real, completed, loss_cfg))
        total = terms if total is None else ad.add(total, terms)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, 1.0 / batch)


def composite_loss(l1: Tensor, l2: Tensor, aux_weight: float) -> Tensor:
    """l1 + aux_weight * l2; with weight zero this IS l1, bit for bit."""
    if aux_weight == 0.0:
        return l1
    return ad.add(l1, ad.scale(l2, aux_weight))


def batch_loss(model: CompletionEmbedder, pairs: Sequence[PairRecord],
               loss_cfg: LossConfig) -> tuple[Tensor, float, float]:
    """Composite loss over one batch; returns (loss, contrastive, alignment)."""
    q = model.embed_batch([r.query for r in pairs])
    t = model.embed_batch([r.positive_target for r in pairs])
    l1 = info_nce(q, t, loss_cfg.temperature)
    if loss_cfg.aux_weight == 0.0:
        return l1, l1.item(), 0.0
    l2 = aux_loss(pairs, model, loss_cfg, query_embs=q, target_embs=t)
    return composite_loss(l1, l2, loss_cfg.aux_weight), l1.item(), l2.item()


class Adam:
    """Plain Adam; no weight decay, no schedule."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def apply_low_rank_adapters(model: CompletionEmbedder, cfg: AdapterConfig,
                            seed: int = 0) -> CompletionEmbedder:
    """Attach zero-initialized low-rank deltas and freeze the base weights.

    Until the first optimizer step the model's forward pass is bitwise
    identical to the unadapted one (the B factor starts at zero).
    """
    if model.adapters:
        raise ContractError("model already has adapters")
    rng = substream(seed, "adapters")
    for name in sorted(model.params):
        tensor = model.params[name]
        if tensor.ndim != 2 or not any(pat in name for pat in cfg.targets):
            continue
        dim_in, dim_out = tensor.shape
        if cfg.rank >= min(dim_in, dim_out):
            raise ContractError(
                f"adapter rank {cfg.rank} must be < min dimension of {name} {tensor.shape}"
            )
        model.adapters[name] = Adapter(
            a=Tensor(rng.normal(0.0, 0.02, size=(cfg.rank, dim_in)), requires_grad=True),
            b=Tensor(np.zeros((dim_out, cfg.rank)), requires_grad=True),
            scaling=cfg.scaling,
        )
    if not model.adapters:
        raise ContractError(f"no parameters matched adapter targets {cfg.targets}")
    for p in model.params.values():
        p.requires_grad = False
    return model


def train(records: Sequence[PairRecord], model: CompletionEmbedder,
          train_cfg: TrainConfig, loss_cfg: LossConfig,
          trace_path: str | Path | None = None) -> list[tuple[int, float]]:
    """Mutates the model in place; returns the (step, loss) trace.

    Batches are index samples without replacement from one named RNG stream,
    so runs are reproducible from the config alone. A non-finite loss aborts
    with the parameters rolled back to the last finite step.
    """
    if not records:
        raise ContractError("cannot train on an empty corpus")
    if train_cfg.batch_size > len(records):
        raise ContractError(
            f"batch_size {train_cfg.batch_size} exceeds corpus size {len(records)}"
        )
    rng = substream(train_cfg.seed, "batching")
    trainable = model.trainable_parameters()
    opt = Adam(trainable, lr=train_cfg.learning_rate, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    trace: list[tuple[int, float]] = []
    snapshot: list[np.ndarray] | None = None
    for step in range(train_cfg.steps):
        idx = rng.choice(len(records), size=train_cfg.batch_size, replace=False)
        batch = [records[int(i)] for i in idx]
        with Tape() as tape:
            loss, _, _ = batch_loss(model, batch, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                if snapshot is not None:
                    for p, saved in zip(trainable, snapshot):
                        p.data = saved
                if trace_path is not None:
                    write_loss_trace(trace, trace_path)
                raise TrainingDiverged(step, value)
            tape.backward(loss)
        snapshot = [p.data.copy() for p in trainable]
        opt.step()
        opt.zero_grad()
        trace.append((step, value))
    if trace_path is not None:
        write_loss_trace(trace, trace_path)
    return trace


def write_loss_trace(trace: Sequence[tuple[int, float]], path: str | Path) -> None:
    """Two columns: step index and loss, one step per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for step, value in trace:
            fh.write(f"{step} {value!r}\n")
