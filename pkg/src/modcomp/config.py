"""Flat `key = value` run configuration.

One file drives a whole run: corpus geometry, model size, padding template,
loss weights, optimizer budget, and the ablation switches. Keys are dotted
(`corpus.vocab_size`, `loss.aux_weight`); `#` starts a comment. Every key is
checked against the schema so a typo fails loudly instead of silently using a
default. `run.seed` is the single source of randomness for the run and must
come from the file or the command line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .corpus import COMBOS, TASK_TAGS, CorpusSpec, eval_spec_from
from .errors import ConfigError
from .model import (AblationFlags, CompletionEmbedder, ModelConfig,
                    PaddingConfig)
from .training import AdapterConfig, LossConfig, TrainConfig

_REQUIRED = object()
_DERIVED = object()

# key -> (type tag, default). _REQUIRED must be supplied; _DERIVED is computed
# from other keys when absent.
_SCHEMA: dict[str, tuple[str, object]] = {
    "run.seed": ("int", _REQUIRED),
    "run.disable_completion": ("bool", False),
    "run.baseline_mode": ("str", "zero"),
    "run.disable_aux_encoder": ("bool", False),
    "run.disable_padding": ("bool", False),
    "run.half_padding": ("bool", False),
    "corpus.vocab_size": ("int", 64),
    "corpus.n_patches": ("int", 8),
    "corpus.patch_dim": ("int", 16),
    "corpus.n_classes": ("int", 40),
    "corpus.n_ood_classes": ("int", 8),
    "corpus.ood_fraction": ("float", 0.0),
    "corpus.content_len": ("int", 4),
    "corpus.instruction_len": ("int", 2),
    "corpus.noise_sigma": ("float", 0.25),
    "corpus.class_token_dropout": ("float", 0.0),
    "corpus.counts.TI_T": ("int", 2500),
    "corpus.counts.T_TI": ("int", 1250),
    "corpus.counts.TI_TI": ("int", 1250),
    "eval.counts.TI_T": ("int", 48),
    "eval.counts.T_TI": ("int", 48),
    "eval.counts.TI_TI": ("int", 48),
    "eval.ood_fraction": ("float", 1.0 / 6.0),
    "model.d_model": ("int", 32),
    "model.n_layers": ("int", 2),
    "model.n_heads": ("int", 4),
    "model.n_visual_tokens": ("int", 8),
    "model.t2i_layers": ("int", 2),
    "model.max_text_len": ("int", 16),
    "model.mlp_ratio": ("int", 4),
    "model.pseudo_through_projector": ("bool", False),
    "padding.target_length": ("int", _DERIVED),
    "padding.prompt_len": ("int", 1),
    "loss.temperature": ("float", 0.02),
    "loss.aux_weight": ("float", 0.2),
    "loss.aux_temp": ("float", 0.1),
    "loss.stop_grad_target": ("bool", True),
    "train.steps": ("int", 300),
    "train.batch_size": ("int", 64),
    "train.learning_rate": ("float", 1e-3),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.adam_eps": ("float", 1e-8),
    "adapter.enabled": ("bool", False),
    "adapter.rank": ("int", 8),
    "adapter.scaling": ("float", 1.0),
}
for _task in TASK_TAGS:
    _SCHEMA[f"corpus.task_mix.{_task}"] = ("float", 1.0)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; no schema applied yet."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{line_no}: empty key or value")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_value(key: str, raw: str, type_tag: str):
    if type_tag == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {raw!r}") from None
    if type_tag == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    if type_tag == "bool":
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key} expects true or false, got {raw!r}")
    if raw and raw[0] == raw[-1] and raw[0] in ("'", '"') and len(raw) >= 2:
        return raw[1:-1]
    return raw


@dataclass
class RunConfig:
    seed: int
    corpus: CorpusSpec
    eval_counts: dict[str, int]
    eval_ood_fraction: float
    model: ModelConfig
    padding: PaddingConfig
    ablation: AblationFlags
    loss: LossConfig
    train: TrainConfig
    adapter: AdapterConfig | None

    def eval_corpus_spec(self) -> CorpusSpec:
        return eval_spec_from(self.corpus, self.eval_counts, self.eval_ood_fraction)

    def build_model(self) -> CompletionEmbedder:
        return CompletionEmbedder(self.model, self.padding, self.ablation, seed=self.seed)


def resolve_config(raw: Mapping[str, str], source: str = "<config>") -> RunConfig:
    """Schema-check raw strings and assemble the run's config objects."""
    values: dict[str, object] = {}
    for key, raw_value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _parse_value(key, raw_value, _SCHEMA[key][0])

    def get(key: str):
        if key in values:
            return values[key]
        default = _SCHEMA[key][1]
        if default is _REQUIRED:
            raise ConfigError(f"{key} is required (set it in the config or pass --seed)")
        return default

    seed = get("run.seed")
    n_visual = get("model.n_visual_tokens")
    half = get("run.half_padding")
    if half and "padding.target_length" in values:
        raise ConfigError("run.half_padding conflicts with an explicit padding.target_length")
    target_length = values.get(
        "padding.target_length",
        n_visual // 2 if half else n_visual,
    )

    corpus = CorpusSpec(
        seed=seed,
        vocab_size=get("corpus.vocab_size"),
        n_patches=get("corpus.n_patches"),
        patch_dim=get("corpus.patch_dim"),
        n_classes=get("corpus.n_classes"),
        n_ood_classes=get("corpus.n_ood_classes"),
        counts={c: get(f"corpus.counts.{c}") for c in COMBOS},
        ood_fraction=get("corpus.ood_fraction"),
        task_mix={t: get(f"corpus.task_mix.{t}") for t in TASK_TAGS},
        content_len=get("corpus.content_len"),
        instruction_len=get("corpus.instruction_len"),
        noise_sigma=get("corpus.noise_sigma"),
        class_token_dropout=get("corpus.class_token_dropout"),
    )
    model = ModelConfig(
        d_model=get("model.d_model"),
        n_layers=get("model.n_layers"),
        n_heads=get("model.n_heads"),
        vocab_size=corpus.vocab_size,
        n_visual_tokens=n_visual,
        n_patches=corpus.n_patches,
        patch_dim=corpus.patch_dim,
        t2i_layers=get("model.t2i_layers"),
        max_text_len=get("model.max_text_len"),
        mlp_ratio=get("model.mlp_ratio"),
        pseudo_through_projector=get("model.pseudo_through_projector"),
    )
    text_len = corpus.instruction_len + corpus.content_len
    if model.max_text_len < text_len:
        raise ConfigError(
            f"model.max_text_len {model.max_text_len} is shorter than corpus text "
            f"({corpus.instruction_len} instruction + {corpus.content_len} content tokens)"
        )
    padding = PaddingConfig.default(corpus.vocab_size, target_length,
                                    prompt_len=get("padding.prompt_len"))
    ablation = AblationFlags(
        disable_completion=get("run.disable_completion"),
        baseline_mode=get("run.baseline_mode"),
        disable_aux_encoder=get("run.disable_aux_encoder"),
        disable_padding=get("run.disable_padding"),
    )
    loss = LossConfig(
        temperature=get("loss.temperature"),
        aux_weight=get("loss.aux_weight"),
        aux_temp=get("loss.aux_temp"),
        stop_grad_target=get("loss.stop_grad_target"),
    )
    train = TrainConfig(
        steps=get("train.steps"),
        batch_size=get("train.batch_size"),
        learning_rate=get("train.learning_rate"),
        beta1=get("train.beta1"),
        beta2=get("train.beta2"),
        adam_eps=get("train.adam_eps"),
        seed=seed,
    )
    adapter = None
    if get("adapter.enabled"):
        adapter = AdapterConfig(rank=get("adapter.rank"), scaling=get("adapter.scaling"))
    return RunConfig(
        seed=seed,
        corpus=corpus,
        eval_counts={c: get(f"eval.counts.{c}") for c in COMBOS},
        eval_ood_fraction=get("eval.ood_fraction"),
        model=model,
        padding=padding,
        ablation=ablation,
        loss=loss,
        train=train,
        adapter=adapter,
    )


def load_run_config(path: str | Path | None,
                    overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Config file plus command-line overrides (override strings win)."""
    raw: dict[str, str] = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        raw = parse_config_text(text, source=source)
    for key, value in (overrides or {}).items():
        raw[key] = value
    return resolve_config(raw, source=source)
