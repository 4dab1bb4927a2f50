"""Retrieval evaluation and the modality-bias experiment.

Scoring is argmax cosine over a candidate pool (embeddings are unit vectors,
so the dot product is the cosine; ties resolve to the lowest index). Pools are
per (task_tag, split) bucket and contain every target in the bucket, whatever
its modality combination — which is exactly what makes modality bias visible:
a text-only query whose embedding carries a "no image" signature will drift
toward same-signature targets instead of same-class ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import (COMBOS, CorpusSpec, ModalInput, PairRecord, gen_corpus,
                     skew_counts)
from .errors import ContractError, TrainingDiverged
from .model import AblationFlags, CompletionEmbedder
from .training import LossConfig, TrainConfig, train


@dataclass
class CandidateIndex:
    embeddings: np.ndarray  # (n, d), unit rows
    ids: list[int]


def build_index(targets: Sequence[ModalInput], model: CompletionEmbedder,
                ids: Sequence[int] | None = None) -> CandidateIndex:
    """Embed candidates into one matrix; ids default to positions."""
    if not targets:
        raise ContractError("cannot index zero candidates")
    if ids is None:
        ids = range(len(targets))
    ids = [int(i) for i in ids]
    if len(ids) != len(targets):
        raise ContractError(f"{len(targets)} targets but {len(ids)} ids")
    embs = model.embed_batch(targets).data
    norms = np.abs(np.sqrt((embs ** 2).sum(axis=1)) - 1.0)
    if norms.max() > 1e-5:
        raise ContractError(f"candidate embeddings must be unit-norm (off by {norms.max():.3e})")
    return CandidateIndex(embeddings=embs, ids=ids)


def nearest_position(embeddings: np.ndarray, query_vec: np.ndarray) -> int:
    """Row index of the highest dot product; ties go to the lowest index.

    Scores come from an elementwise product reduced per row rather than a
    BLAS matrix-vector call: gemv is free to accumulate different rows in
    different orders, which breaks the tie rule for byte-identical candidates.
    """
    if embeddings.ndim != 2 or embeddings.shape[1] != query_vec.shape[-1]:
        raise ContractError(f"index {embeddings.shape} does not match query {query_vec.shape}")
    return int(np.argmax((embeddings * query_vec).sum(axis=1)))


def match(query: ModalInput, index: CandidateIndex, model: CompletionEmbedder) -> int:
    """Best candidate id for the query under cosine similarity."""
    q = model.embed(query).data
    return index.ids[nearest_position(index.embeddings, q)]


def precision_at_1(predictions: Sequence[int], gold: Sequence[int]) -> float:
    if len(predictions) != len(gold):
        raise ContractError(f"{len(predictions)} predictions vs {len(gold)} gold ids")
    if not predictions:
        raise ContractError("precision over zero queries")
    hits = sum(int(p == g) for p, g in zip(predictions, gold))
    return hits / len(predictions)


# ---------------------------------------------------------------------------
# corpus-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class BucketScore:
    task_tag: str
    split: str
    n_queries: int
    n_candidates: int
    p_at_1: float
    degenerate: bool = False


@dataclass
class ScoreReport:
    buckets: list[BucketScore]
    per_task: dict[str, float]
    per_combo: dict[str, float]
    ind: float | None
    ood: float | None
    overall: float
    n_queries: int   # every query, degenerate buckets included
    n_scored: int    # queries that entered the aggregates

    def json_lines(self) -> list[str]:
        lines = [json.dumps({
            "kind": "summary", "overall": self.overall, "ind": self.ind, "ood": self.ood,
            "n_queries": self.n_queries, "n_scored": self.n_scored,
        }, sort_keys=True)]
        for task in sorted(self.per_task):
            lines.append(json.dumps({"kind": "task", "task_tag": task,
                                     "p_at_1": self.per_task[task]}, sort_keys=True))
        for combo in sorted(self.per_combo):
            lines.append(json.dumps({"kind": "combo", "combo": combo,
                                     "p_at_1": self.per_combo[combo]}, sort_keys=True))
        for b in self.buckets:
            lines.append(json.dumps({
                "kind": "bucket", "task_tag": b.task_tag, "split": b.split,
                "n_queries": b.n_queries, "n_candidates": b.n_candidates,
                "p_at_1": b.p_at_1, "degenerate": b.degenerate,
            }, sort_keys=True))
        return lines

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.json_lines()) + "\n", encoding="utf-8")

    def table(self) -> str:
        rows = [("bucket", "n", "pool", "P@1")]
        for b in self.buckets:
            label = f"{b.task_tag}/{b.split}" + (" (degenerate)" if b.degenerate else "")
            rows.append((label, str(b.n_queries), str(b.n_candidates), f"{b.p_at_1:.4f}"))
        for combo in sorted(self.per_combo):
            rows.append((f"combo {combo}", "", "", f"{self.per_combo[combo]:.4f}"))
        summary = [("IND", self.ind), ("OOD", self.ood), ("overall", self.overall)]
        for name, val in summary:
            rows.append((name, "", "", "-" if val is None else f"{val:.4f}"))
        return format_table(rows)


def format_table(rows: Sequence[tuple[str, ...]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for i, r in enumerate(rows):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def evaluate(records: Sequence[PairRecord], model: CompletionEmbedder) -> ScoreReport:
    """Score every query against its (task_tag, split) bucket's target pool.

    Gold is the query's own paired target. Buckets with a single candidate are
    trivially perfect, get flagged degenerate, and stay out of the aggregates;
    their queries still show up in n_queries so the accounting always sums to
    the corpus size.
    """
    if not records:
        raise ContractError("cannot evaluate an empty corpus")
    buckets: dict[tuple[str, str], list[int]] = {}
    for i, r in enumerate(records):
        buckets.setdefault((r.task_tag, r.split), []).append(i)

    scores: list[BucketScore] = []
    hit_rows: list[tuple[PairRecord, bool]] = []
    for (task, split) in sorted(buckets):
        idxs = buckets[(task, split)]
        pool = build_index([records[i].positive_target for i in idxs], model, ids=idxs)
        queries = model.embed_batch([records[i].query for i in idxs]).data
        preds = np.argmax(queries @ pool.embeddings.T, axis=1)
        degenerate = len(idxs) == 1
        hits = [pool.ids[p] == i for p, i in zip(preds, idxs)]
        scores.append(BucketScore(
            task_tag=task, split=split, n_queries=len(idxs), n_candidates=len(idxs),
            p_at_1=1.0 if degenerate else float(np.mean(hits)), degenerate=degenerate,
        ))
        if not degenerate:
            hit_rows.extend((records[i], h) for i, h in zip(idxs, hits))

    if not hit_rows:
        raise ContractError("every bucket is degenerate; nothing to score")

    def rate(selector: Callable[[PairRecord], bool]) -> float | None:
        sub = [h for r, h in hit_rows if selector(r)]
        return float(np.mean(sub)) if sub else None

    per_task = {t: rate(lambda r, t=t: r.task_tag == t)
                for t in sorted({r.task_tag for r, _ in hit_rows})}
    per_combo = {c: rate(lambda r, c=c: r.combo == c)
                 for c in sorted({r.combo for r, _ in hit_rows})}
    return ScoreReport(
        buckets=scores,
        per_task=per_task,
        per_combo=per_combo,
        ind=rate(lambda r: r.split == "IND"),
        ood=rate(lambda r: r.split == "OOD"),
        overall=float(np.mean([h for _, h in hit_rows])),
        n_queries=len(records),
        n_scored=len(hit_rows),
    )


# ---------------------------------------------------------------------------
# bias experiment
# ---------------------------------------------------------------------------

ARCH_COMPLETION = "completion"
ARCH_ZERO_FILL = "zero_fill"


@dataclass
class BiasReport:
    """P@1 per (architecture, dominant-combo variant, eval combo), plus the
    per-variant spread across eval combos. Cells are None when training
    diverged for every seed of that cell."""

    archs: tuple[str, ...]
    variants: tuple[str, ...]
    combos: tuple[str, ...]
    seeds: tuple[int, ...]
    scores: dict[str, dict[str, dict[str, float | None]]]
    spreads: dict[str, dict[str, float | None]]
    failures: list[str] = field(default_factory=list)

    def json_lines(self) -> list[str]:
        lines = [json.dumps({"kind": "meta", "archs": list(self.archs),
                             "variants": list(self.variants), "combos": list(self.combos),
                             "seeds": list(self.seeds), "failures": self.failures},
                            sort_keys=True)]
        for arch in self.archs:
            for variant in self.variants:
                lines.append(json.dumps({
                    "kind": "cell", "arch": arch, "dominant": variant,
                    "per_combo": self.scores[arch][variant],
                    "spread": self.spreads[arch][variant],
                }, sort_keys=True))
        return lines

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.json_lines()) + "\n", encoding="utf-8")

    def table(self) -> str:
        def cell(v: float | None) -> str:
            return "failed" if v is None else f"{v:.4f}"

        rows = [("arch", "dominant", *self.combos, "spread")]
        for arch in self.archs:
            for variant in self.variants:
                per = self.scores[arch][variant]
                rows.append((arch, variant, *(cell(per[c]) for c in self.combos),
                             cell(self.spreads[arch][variant])))
        return format_table(rows)


def bias_experiment(base_spec: CorpusSpec, eval_records: Sequence[PairRecord],
                    model_factory: Callable[[AblationFlags, int], CompletionEmbedder],
                    train_cfg: TrainConfig, loss_cfg: LossConfig,
                    seeds: Sequence[int] = (0, 1, 2)) -> BiasReport:
    """Train on three skewed corpora, with and without the completion module.

    Each variant makes one combo half the training pairs (the other two a
    quarter each). Corpora are generated once per variant and shared by both
    architectures; at a given seed both architectures start from the same
    initialization, so the comparison is paired. The zero-fill architecture
    trains with the alignment weight at zero (it has nothing to align).
    A diverging cell is recorded as failed; the report is still produced.
    """
    total = sum(base_spec.counts.values())
    archs = (ARCH_COMPLETION, ARCH_ZERO_FILL)
    scores: dict[str, dict[str, dict[str, float | None]]] = {a: {} for a in archs}
    spreads: dict[str, dict[str, float | None]] = {a: {} for a in archs}
    failures: list[str] = []
    for dominant in COMBOS:
        variant_spec = replace(base_spec, counts=skew_counts(total, dominant))
        records = list(gen_corpus(variant_spec))
        tally = {c: 0 for c in COMBOS}
        for r in records:
            tally[r.combo] += 1
        if tally != variant_spec.counts:
            raise ContractError(f"variant {dominant}: generated {tally}, wanted {variant_spec.counts}")
        for arch in archs:
            ablation = AblationFlags(disable_completion=(arch == ARCH_ZERO_FILL))
            cfg = loss_cfg if arch == ARCH_COMPLETION else replace(loss_cfg, aux_weight=0.0)
            per_seed: list[dict[str, float]] = []
            for seed in seeds:
                model = model_factory(ablation, seed)
                try:
                    train(records, model, replace(train_cfg, seed=seed), cfg)
                except TrainingDiverged as e:
                    failures.append(f"{arch}/{dominant}/seed={seed}: diverged at step {e.step}")
                    continue
                report = evaluate(eval_records, model)
                per_seed.append({c: report.per_combo.get(c) for c in COMBOS})
            if per_seed and all(all(v is not None for v in s.values()) for s in per_seed):
                mean = {c: float(np.mean([s[c] for s in per_seed])) for c in COMBOS}
                scores[arch][dominant] = mean
                spreads[arch][dominant] = float(np.std(list(mean.values())))
            else:
                scores[arch][dominant] = {c: None for c in COMBOS}
                spreads[arch][dominant] = None
    return BiasReport(archs=archs, variants=COMBOS, combos=COMBOS, seeds=tuple(seeds),
                      scores=scores, spreads=spreads, failures=failures)
