"""Synthetic paired multi-modal corpus.

Every pair shares a latent class. The text side carries the class as one
class-specific token hidden among filler tokens; the image side is the class
prototype patch grid plus Gaussian noise. Text therefore genuinely predicts
image content, which is what makes the text-to-image completion path
learnable. Task tags change only the instruction prefix and the reporting
bucket; the pairing rule is the same for all of them.

Token id layout (derived from the spec fields, documented here once):

    [0, n_tasks * instruction_len)            instruction prefixes, fixed per task
    [class_base, class_base + n_classes)      one class token per class
    [class_base + n_classes, vocab_size)      filler tokens

Generation order is split-major (IND then OOD), then task, then combo, and
classes walk one shuffled pool per split, so per-class pair counts stay within
one of each other and any evaluation bucket whose size fits the pool gets
all-distinct classes (unambiguous retrieval gold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, EmptyCorpusError, ManifestError
from .seeding import substream

COMBOS = ("TI_T", "T_TI", "TI_TI")
TASK_TAGS = ("classification", "retrieval", "vqa", "grounding")
SPLITS = ("IND", "OOD")


def query_has_image(combo: str) -> bool:
    return combo in ("TI_T", "TI_TI")


def target_has_image(combo: str) -> bool:
    return combo in ("T_TI", "TI_TI")


@dataclass
class ModalInput:
    """One side of a pair: instruction + content tokens, optional patch grid."""

    instruction: tuple[int, ...]
    content: tuple[int, ...]
    image: np.ndarray | None = None

    def __post_init__(self):
        self.instruction = tuple(int(t) for t in self.instruction)
        self.content = tuple(int(t) for t in self.content)
        if not self.instruction or not self.content:
            raise ContractError("instruction and content must be non-empty")
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
            if self.image.ndim != 2:
                raise ContractError(f"patch grid must be 2-D, got shape {self.image.shape}")

    @property
    def text(self) -> tuple[int, ...]:
        return self.instruction + self.content

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModalInput):
            return NotImplemented
        if (self.instruction, self.content) != (other.instruction, other.content):
            return False
        if (self.image is None) != (other.image is None):
            return False
        return self.image is None or bool(np.array_equal(self.image, other.image))


@dataclass
class PairRecord:
    query: ModalInput
    positive_target: ModalInput
    combo: str
    task_tag: str
    split: str
    class_id: int

    def __post_init__(self):
        if self.combo not in COMBOS:
            raise ContractError(f"unknown combo {self.combo!r}")
        if self.task_tag not in TASK_TAGS:
            raise ContractError(f"unknown task_tag {self.task_tag!r}")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")


def _default_counts() -> dict[str, int]:
    # Skewed half / quarter / quarter toward query-image pairs, the shape real
    # training mixtures tend to have.
    return {"TI_T": 2500, "T_TI": 1250, "TI_TI": 1250}


def _default_task_mix() -> dict[str, float]:
    return {t: 1.0 for t in TASK_TAGS}


@dataclass
class CorpusSpec:
    seed: int = 0
    vocab_size: int = 64
    n_patches: int = 8
    patch_dim: int = 16
    n_classes: int = 40
    n_ood_classes: int = 8
    counts: dict[str, int] = field(default_factory=_default_counts)
    ood_fraction: float = 0.0
    task_mix: dict[str, float] = field(default_factory=_default_task_mix)
    content_len: int = 4
    instruction_len: int = 2
    noise_sigma: float = 0.25
    class_token_dropout: float = 0.0
    stream_tag: str = "train"

    def __post_init__(self):
        if set(self.counts) - set(COMBOS):
            raise ContractError(f"unknown combos in counts: {sorted(set(self.counts) - set(COMBOS))}")
        if any(v < 0 for v in self.counts.values()):
            raise ContractError("counts must be non-negative")
        if not 0.0 <= self.ood_fraction <= 1.0:
            raise ContractError(f"ood_fraction {self.ood_fraction} outside [0, 1]")
        if not 0 <= self.n_ood_classes < self.n_classes:
            raise ContractError("need 0 <= n_ood_classes < n_classes")
        if self.ood_fraction > 0.0 and self.n_ood_classes == 0:
            raise ContractError("ood_fraction > 0 needs reserved OOD classes")
        if set(self.task_mix) - set(TASK_TAGS):
            raise ContractError(f"unknown task tags: {sorted(set(self.task_mix) - set(TASK_TAGS))}")
        if any(w < 0 for w in self.task_mix.values()) or sum(self.task_mix.values()) <= 0:
            raise ContractError("task_mix weights must be non-negative with positive sum")
        if self.content_len < 1 or self.instruction_len < 1:
            raise ContractError("content_len and instruction_len must be >= 1")
        if self.filler_base >= self.vocab_size:
            raise ContractError(
                f"vocab_size {self.vocab_size} too small: instructions + {self.n_classes} "
                f"class tokens need {self.filler_base} ids plus at least one filler"
            )

    @property
    def class_base(self) -> int:
        return len(TASK_TAGS) * self.instruction_len

    @property
    def filler_base(self) -> int:
        return self.class_base + self.n_classes

    @property
    def n_ind_classes(self) -> int:
        return self.n_classes - self.n_ood_classes

    def class_token(self, class_id: int) -> int:
        if not 0 <= class_id < self.n_classes:
            raise ContractError(f"class_id {class_id} outside [0, {self.n_classes})")
        return self.class_base + class_id

    def instruction_for(self, task_tag: str) -> tuple[int, ...]:
        base = TASK_TAGS.index(task_tag) * self.instruction_len
        return tuple(range(base, base + self.instruction_len))

    def split_classes(self, split: str) -> range:
        if split == "IND":
            return range(self.n_ind_classes)
        return range(self.n_ind_classes, self.n_classes)


def class_prototypes(spec: CorpusSpec) -> np.ndarray:
    """(n_classes, n_patches, patch_dim) fixed prototype grids for the seed."""
    rng = substream(spec.seed, "corpus", "prototypes")
    return rng.standard_normal((spec.n_classes, spec.n_patches, spec.patch_dim))


def gen_item(spec: CorpusSpec, class_id: int, rng: np.random.Generator,
             with_image: bool, task_tag: str = "retrieval", label_only: bool = False,
             prototypes: np.ndarray | None = None) -> ModalInput:
    """One modal input of the given class; pure function of the rng state."""
    if prototypes is None:
        prototypes = class_prototypes(spec)
    token = spec.class_token(class_id)
    if label_only:
        content = (token,)
    else:
        fillers = rng.integers(spec.filler_base, spec.vocab_size, size=spec.content_len - 1)
        slot = int(rng.integers(spec.content_len))
        # Only captions may omit the class word; a bare text side must name it
        # or the record carries no class signal at all.
        if with_image and spec.class_token_dropout > 0.0 and rng.random() < spec.class_token_dropout:
            token = int(rng.integers(spec.filler_base, spec.vocab_size))
        toks = list(map(int, fillers))
        toks.insert(slot, token)
        content = tuple(toks)
    image = None
    if with_image:
        noise = rng.standard_normal((spec.n_patches, spec.patch_dim))
        image = prototypes[class_id] + spec.noise_sigma * noise
    return ModalInput(instruction=spec.instruction_for(task_tag), content=content, image=image)


def _apportion(total: int, weights: dict[str, float], order: tuple[str, ...]) -> dict[str, int]:
    """Largest-remainder split of `total` over `weights`, deterministic on ties."""
    wsum = sum(weights.get(k, 0.0) for k in order)
    quotas = {k: total * weights.get(k, 0.0) / wsum for k in order}
    out = {k: int(quotas[k]) for k in order}
    short = total - sum(out.values())
    by_frac = sorted(order, key=lambda k: (-(quotas[k] - out[k]), order.index(k)))
    for k in by_frac[:short]:
        out[k] += 1
    return out


def _split_counts(spec: CorpusSpec) -> dict[tuple[str, str, str], int]:
    """(split, task, combo) -> record count."""
    out: dict[tuple[str, str, str], int] = {}
    for combo in COMBOS:
        total = spec.counts.get(combo, 0)
        n_ood = int(round(total * spec.ood_fraction))
        for split, n in (("IND", total - n_ood), ("OOD", n_ood)):
            per_task = _apportion(n, spec.task_mix, TASK_TAGS)
            for task in TASK_TAGS:
                out[(split, task, combo)] = per_task[task]
    return out


class _ClassCycle:
    """Cyclic walk over one shuffled class pool; balanced to within one."""

    def __init__(self, pool: Iterable[int], rng: np.random.Generator):
        self.order = list(pool)
        rng.shuffle(self.order)
        self.cursor = 0

    def take(self) -> int:
        c = self.order[self.cursor % len(self.order)]
        self.cursor += 1
        return c


def gen_corpus(spec: CorpusSpec) -> Iterator[PairRecord]:
    """Stream of PairRecords; fully determined by the spec."""
    counts = _split_counts(spec)
    if sum(counts.values()) == 0:
        raise EmptyCorpusError("corpus spec generates zero records")
    prototypes = class_prototypes(spec)
    cycles = {
        split: _ClassCycle(spec.split_classes(split), substream(spec.seed, "corpus", "classes", split))
        for split in SPLITS
    }
    index = 0
    for split in SPLITS:
        for task in TASK_TAGS:
            for combo in COMBOS:
                for _ in range(counts[(split, task, combo)]):
                    class_id = cycles[split].take()
                    rng = substream(spec.seed, "corpus", spec.stream_tag, index)
                    query = gen_item(spec, class_id, rng, query_has_image(combo),
                                     task_tag=task, prototypes=prototypes)
                    target = gen_item(spec, class_id, rng, target_has_image(combo),
                                      task_tag=task, label_only=(task == "classification"),
                                      prototypes=prototypes)
                    yield PairRecord(query=query, positive_target=target, combo=combo,
                                     task_tag=task, split=split, class_id=class_id)
                    index += 1


def skew_counts(total: int, dominant: str) -> dict[str, int]:
    """Half the pairs on `dominant`, the rest split evenly over the other two."""
    if dominant not in COMBOS:
        raise ContractError(f"unknown combo {dominant!r}")
    if total % 4 != 0:
        raise ContractError(f"skewed total must be divisible by 4, got {total}")
    out = {c: total // 4 for c in COMBOS}
    out[dominant] = total // 2
    return out


def eval_spec_from(train_spec: CorpusSpec, counts: dict[str, int],
                   ood_fraction: float) -> CorpusSpec:
    """Eval-side spec sharing the train spec's seed (same classes, fresh items)."""
    return replace(train_spec, counts=dict(counts), ood_fraction=ood_fraction,
                   stream_tag="eval")


def corpus_tallies(records: Iterable[PairRecord]) -> dict[str, dict[str, int]]:
    by_combo: dict[str, int] = {c: 0 for c in COMBOS}
    by_bucket: dict[str, int] = {}
    by_class: dict[str, int] = {}
    for r in records:
        by_combo[r.combo] += 1
        bucket = f"{r.task_tag}/{r.split}"
        by_bucket[bucket] = by_bucket.get(bucket, 0) + 1
        by_class[str(r.class_id)] = by_class.get(str(r.class_id), 0) + 1
    return {"combo": by_combo, "bucket": by_bucket, "class": by_class}


# ---------------------------------------------------------------------------
# manifest I/O: one self-describing JSON object per line
# ---------------------------------------------------------------------------

def _input_to_json(item: ModalInput) -> dict:
    return {
        "instruction": list(item.instruction),
        "content": list(item.content),
        "image": None if item.image is None else item.image.tolist(),
    }


def _input_from_json(obj: dict, line_no: int) -> ModalInput:
    try:
        image = obj["image"]
        return ModalInput(
            instruction=tuple(obj["instruction"]),
            content=tuple(obj["content"]),
            image=None if image is None else np.asarray(image, dtype=np.float64),
        )
    except (KeyError, TypeError, ContractError) as e:
        raise ManifestError(f"line {line_no}: bad modal input ({e})", line_no) from e


def record_to_json(record: PairRecord) -> str:
    obj = {
        "query": _input_to_json(record.query),
        "target": _input_to_json(record.positive_target),
        "combo": record.combo,
        "task_tag": record.task_tag,
        "split": record.split,
        "class_id": record.class_id,
    }
    return json.dumps(obj, sort_keys=True)


def record_from_json(line: str, line_no: int = 0) -> PairRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError(f"line {line_no}: not valid JSON ({e.msg})", line_no) from e
    if not isinstance(obj, dict):
        raise ManifestError(f"line {line_no}: expected an object", line_no)
    missing = {"query", "target", "combo", "task_tag", "split", "class_id"} - set(obj)
    if missing:
        raise ManifestError(f"line {line_no}: missing keys {sorted(missing)}", line_no)
    try:
        return PairRecord(
            query=_input_from_json(obj["query"], line_no),
            positive_target=_input_from_json(obj["target"], line_no),
            combo=obj["combo"],
            task_tag=obj["task_tag"],
            split=obj["split"],
            class_id=int(obj["class_id"]),
        )
    except ContractError as e:
        raise ManifestError(f"line {line_no}: {e}", line_no) from e


def write_manifest(records: Iterable[PairRecord], path: str | Path) -> int:
    """Writes records as JSON lines; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")
            n += 1
    return n


def read_manifest(path: str | Path) -> list[PairRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(record_from_json(line, line_no))
    return records
