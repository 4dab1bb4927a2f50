"""Embedding model with a text-to-image modality-completion path.

An input is [visual tokens][instruction][content] fed to a causal backbone;
the embedding is the final position's hidden state, L2-normalized. Inputs that
carry an image get their visual tokens from the vision encoder. Text-only
inputs get pseudo visual tokens instead: the text is wrapped in a fixed
padding template, run through a small causal text-to-image language model, and
the last-layer hidden states are re-encoded by an auxiliary encoder. By
default pseudo and real visual tokens have the same shape (V x d_model), so
the backbone never sees a missing modality.

Parameter names double as the checkpoint field names:

    backbone.tok_emb, backbone.pos_emb,
    backbone.layers.{i}.{ln1,ln2}.{gain,bias},
    backbone.layers.{i}.attn.{wq,wk,wv,wo},
    backbone.layers.{i}.mlp.{w1,w2}, backbone.ln_f.{gain,bias}
    vision.patch_embed, vision.pos_emb, vision.layers.*, vision.ln_f.*,
    vision.proj, vision.pool (only when n_patches != n_visual_tokens)
    t2i.tok_emb, t2i.pos_emb, t2i.layers.*, t2i.ln_f.*
    aux.in_proj, aux.pos_emb, aux.layers.*, aux.ln_f.*, aux.proj
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ModalInput
from .errors import (CheckpointError, ContractError, DimensionError,
                     PaddingOverflowError)
from .seeding import substream

CHECKPOINT_MAGIC = b"MODCOMP1\n"


@dataclass
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 64
    n_visual_tokens: int = 8
    n_patches: int = 8
    patch_dim: int = 16
    t2i_layers: int = 2
    max_text_len: int = 16
    mlp_ratio: int = 4
    pseudo_through_projector: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "n_visual_tokens",
                     "n_patches", "patch_dim", "t2i_layers", "max_text_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")


@dataclass
class PaddingConfig:
    """Template: prompt ++ content ++ [end] ++ dummies, total = target_length."""

    prompt: tuple[int, ...]
    end_token: int
    dummy_token: int
    target_length: int

    def __post_init__(self):
        self.prompt = tuple(int(t) for t in self.prompt)
        ids = [*self.prompt, self.end_token, self.dummy_token]
        if len(set(ids)) != len(ids):
            raise ContractError(f"reserved token ids must be distinct: {ids}")
        if not self.prompt:
            raise ContractError("padding prompt must be non-empty")
        if self.target_length < len(self.prompt) + 2:
            raise ContractError(
                f"target_length {self.target_length} cannot fit prompt ({len(self.prompt)}) "
                "+ one content token + end marker"
            )

    @classmethod
    def default(cls, vocab_size: int, target_length: int, prompt_len: int = 1) -> "PaddingConfig":
        """Reserved ids sit directly above the corpus vocabulary."""
        prompt = tuple(range(vocab_size, vocab_size + prompt_len))
        return cls(prompt=prompt, end_token=vocab_size + prompt_len,
                   dummy_token=vocab_size + prompt_len + 1, target_length=target_length)

    def max_content_len(self) -> int:
        return self.target_length - len(self.prompt) - 1


@dataclass
class AblationFlags:
    disable_completion: bool = False
    baseline_mode: str = "zero"  # zero | none, used only when completion is off
    disable_aux_encoder: bool = False
    disable_padding: bool = False

    def __post_init__(self):
        if self.baseline_mode not in ("zero", "none"):
            raise ContractError(f"baseline_mode must be 'zero' or 'none', got {self.baseline_mode!r}")


def pad_prompt(content: Sequence[int], cfg: PaddingConfig) -> list[int]:
    """Wrap content in the fixed template, dummy-padded to target_length.

    The end marker lands at position len(prompt) + len(content); overflow is an
    error, never a silent truncation.
    """
    content = list(int(t) for t in content)
    n_dummy = cfg.target_length - len(cfg.prompt) - len(content) - 1
    if n_dummy < 0:
        raise PaddingOverflowError(
            f"content of {len(content)} tokens exceeds target_length {cfg.target_length} "
            f"(max admissible: {cfg.max_content_len()})",
            max_content_len=cfg.max_content_len(),
        )
    return list(cfg.prompt) + content + [cfg.end_token] + [cfg.dummy_token] * n_dummy


def drop_image(item: ModalInput) -> ModalInput:
    """Same text, no image; feeds the completion route during training."""
    return ModalInput(instruction=item.instruction, content=item.content, image=None)


@dataclass
class Adapter:
    """Low-rank delta for a 2-D weight: effective W = W + scaling * (B @ A).T."""

    a: Tensor  # (rank, dim_in)
    b: Tensor  # (dim_out, rank)
    scaling: float


class CompletionEmbedder:
    """The embedding model; stateless across calls apart from route counters."""

    def __init__(self, cfg: ModelConfig, padding: PaddingConfig,
                 ablation: AblationFlags | None = None, seed: int = 0):
        self.cfg = cfg
        self.padding = padding
        self.ablation = ablation or AblationFlags()
        self.seed = seed
        reserved = [*padding.prompt, padding.end_token, padding.dummy_token]
        if min(reserved) < cfg.vocab_size:
            raise ContractError(
                f"reserved padding ids {reserved} collide with corpus vocab [0, {cfg.vocab_size})"
            )
        self.t2i_vocab = max(reserved) + 1
        self.max_visual = max(cfg.n_visual_tokens, padding.target_length, cfg.max_text_len)
        self.adapters: dict[str, Adapter] = {}
        self.counters = {"encode_image": 0, "complete_modality": 0, "zero_fill": 0, "no_visual": 0}
        self.params = self._init_params(substream(seed, "init"))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng) -> dict[str, Tensor]:
        cfg = self.cfg
        d = cfg.d_model
        p: dict[str, Tensor] = {}

        def mat(name: str, shape: tuple[int, int]):
            p[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def stack(prefix: str, n_layers: int):
            for i in range(n_layers):
                base = f"{prefix}.layers.{i}"
                for ln in ("ln1", "ln2"):
                    p[f"{base}.{ln}.gain"] = Tensor(np.ones(d), requires_grad=True)
                    p[f"{base}.{ln}.bias"] = Tensor(np.zeros(d), requires_grad=True)
                for w in ("wq", "wk", "wv", "wo"):
                    mat(f"{base}.attn.{w}", (d, d))
                mat(f"{base}.mlp.w1", (d, cfg.mlp_ratio * d))
                mat(f"{base}.mlp.w2", (cfg.mlp_ratio * d, d))
            p[f"{prefix}.ln_f.gain"] = Tensor(np.ones(d), requires_grad=True)
            p[f"{prefix}.ln_f.bias"] = Tensor(np.zeros(d), requires_grad=True)

        mat("backbone.tok_emb", (cfg.vocab_size, d))
        mat("backbone.pos_emb", (self.max_visual + cfg.max_text_len, d))
        stack("backbone", cfg.n_layers)

        mat("vision.patch_embed", (cfg.patch_dim, d))
        mat("vision.pos_emb", (cfg.n_patches, d))
        stack("vision", cfg.n_layers)
        mat("vision.proj", (d, d))
        if cfg.n_patches != cfg.n_visual_tokens:
            mat("vision.pool", (cfg.n_visual_tokens, cfg.n_patches))

        t2i_len = max(self.padding.target_length, cfg.max_text_len)
        mat("t2i.tok_emb", (self.t2i_vocab, d))
        mat("t2i.pos_emb", (t2i_len, d))
        stack("t2i", cfg.t2i_layers)

        mat("aux.in_proj", (d, d))
        mat("aux.pos_emb", (t2i_len, d))
        stack("aux", cfg.n_layers)
        mat("aux.proj", (d, d))
        return p

    def weight(self, name: str) -> Tensor:
        base = self.params[name]
        adapter = self.adapters.get(name)
        if adapter is None:
            return base
        delta = ad.transpose(ad.matmul(adapter.b, adapter.a))
        return ad.add(base, ad.scale(delta, adapter.scaling))

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def trainable_parameters(self) -> list[Tensor]:
        if self.adapters:
            out = []
            for name in sorted(self.adapters):
                out.extend((self.adapters[name].a, self.adapters[name].b))
            return out
        return self.parameters()

    def effective_state(self) -> dict[str, np.ndarray]:
        """Parameter arrays with any adapter deltas merged in."""
        out = {}
        for name in sorted(self.params):
            adapter = self.adapters.get(name)
            if adapter is None:
                out[name] = self.params[name].data.copy()
            else:
                delta = adapter.scaling * (adapter.b.data @ adapter.a.data).T
                out[name] = self.params[name].data + delta
        return out

    def reset_counters(self) -> None:
        for k in self.counters:
            self.counters[k] = 0

    # -- shared transformer pieces -------------------------------------------

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def _stack(self, prefix: str, x: Tensor, n_layers: int, causal: bool) -> Tensor:
        """x (B, L, d) -> (B, L, d): pre-LN blocks, then a final layer norm."""
        for i in range(n_layers):
            base = f"{prefix}.layers.{i}"
            h = ad.self_attention(
                self._ln(f"{base}.ln1", x),
                self.weight(f"{base}.attn.wq"), self.weight(f"{base}.attn.wk"),
                self.weight(f"{base}.attn.wv"), self.weight(f"{base}.attn.wo"),
                self.cfg.n_heads, causal=causal,
            )
            x = ad.add(x, h)
            m = ad.matmul(ad.gelu(ad.matmul(self._ln(f"{base}.ln2", x), self.weight(f"{base}.mlp.w1"))),
                          self.weight(f"{base}.mlp.w2"))
            x = ad.add(x, m)
        return self._ln(f"{prefix}.ln_f", x)

    def _positions(self, prefix: str, length: int) -> Tensor:
        table = self.weight(f"{prefix}.pos_emb")
        if length > table.shape[0]:
            raise DimensionError(f"sequence of {length} exceeds {prefix} position table {table.shape[0]}")
        return ad.narrow(table, 0, 0, length)

    # -- encoders -------------------------------------------------------------

    def encode_image_batch(self, patches: np.ndarray) -> Tensor:
        """(n, n_patches, patch_dim) -> (n, V, d) real visual tokens."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 3 or patches.shape[1:] != (self.cfg.n_patches, self.cfg.patch_dim):
            raise DimensionError(
                f"patch grids {patches.shape} do not match config "
                f"(n, {self.cfg.n_patches}, {self.cfg.patch_dim})"
            )
        self.counters["encode_image"] += patches.shape[0]
        x = ad.matmul(Tensor(patches), self.weight("vision.patch_embed"))
        x = ad.add(x, self._positions("vision", self.cfg.n_patches))
        x = self._stack("vision", x, self.cfg.n_layers, causal=False)
        x = ad.matmul(x, self.weight("vision.proj"))
        if self.cfg.n_patches != self.cfg.n_visual_tokens:
            x = ad.matmul(self.weight("vision.pool"), x)
        return x

    def encode_image(self, patches: np.ndarray) -> Tensor:
        """(n_patches, patch_dim) -> (V, d)."""
        out = self.encode_image_batch(np.asarray(patches)[None, :, :])
        return ad.reshape(out, out.shape[1:])

    def complete_modality_batch(self, texts: Sequence[Sequence[int]]) -> Tensor:
        """Text token sequences -> (n, L', d) pseudo visual tokens.

        All texts in one call must share a length after padding (the default
        template guarantees that; with padding disabled the caller groups by
        raw length). L' is target_length, or the raw length when padding is
        disabled.
        """
        if not texts:
            raise ContractError("complete_modality of an empty batch")
        if self.ablation.disable_padding:
            seqs = [list(map(int, t)) for t in texts]
        else:
            seqs = [pad_prompt(t, self.padding) for t in texts]
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise DimensionError(f"mixed sequence lengths in one completion batch: {sorted(lengths)}")
        ids = np.asarray(seqs, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.t2i_vocab:
            raise ContractError(f"token id {int(ids.max())} outside completion vocab [0, {self.t2i_vocab})")
        self.counters["complete_modality"] += len(seqs)
        x = ad.take(self.weight("t2i.tok_emb"), ids)
        x = ad.add(x, self._positions("t2i", ids.shape[1]))
        x = self._stack("t2i", x, self.cfg.t2i_layers, causal=True)
        if not self.ablation.disable_aux_encoder:
            x = ad.matmul(x, self.weight("aux.in_proj"))
            x = ad.add(x, self._positions("aux", ids.shape[1]))
            x = self._stack("aux", x, self.cfg.n_layers, causal=False)
            x = ad.matmul(x, self.weight("aux.proj"))
        if self.cfg.pseudo_through_projector:
            x = ad.matmul(x, self.weight("vision.proj"))
        return x

    def complete_modality(self, content: Sequence[int]) -> Tensor:
        """One text -> (L', d)."""
        out = self.complete_modality_batch([list(content)])
        return ad.reshape(out, out.shape[1:])

    # -- embedding -------------------------------------------------------------

    def _route(self, item: ModalInput) -> str:
        if item.image is not None:
            return "real"
        if not self.ablation.disable_completion:
            return "pseudo"
        return self.ablation.baseline_mode  # "zero" or "none"

    def _visual_len(self, route: str, text_len: int) -> int:
        if route in ("real", "zero"):
            return self.cfg.n_visual_tokens
        if route == "pseudo":
            return text_len if self.ablation.disable_padding else self.padding.target_length
        return 0

    def _check_text(self, item: ModalInput) -> None:
        text = item.text
        if len(text) > self.cfg.max_text_len:
            raise DimensionError(f"text of {len(text)} tokens exceeds max_text_len {self.cfg.max_text_len}")
        bad = [t for t in text if not 0 <= t < self.cfg.vocab_size]
        if bad:
            raise ContractError(f"token id {bad[0]} outside vocab [0, {self.cfg.vocab_size})")

    def embed_batch(self, items: Sequence[ModalInput]) -> Tensor:
        """Items -> (n, d) unit-norm embeddings, order preserved.

        Routing is per item: an image present means the vision encoder and
        never the completion module; text-only means pseudo tokens (or the
        configured baseline substitute). Items are grouped by route and
        sequence geometry so each group runs as one batched forward.
        """
        if not items:
            raise ContractError("embed of an empty batch")
        groups: dict[tuple[str, int, int], list[int]] = {}
        for i, item in enumerate(items):
            self._check_text(item)
            route = self._route(item)
            key = (route, self._visual_len(route, len(item.text)), len(item.text))
            groups.setdefault(key, []).append(i)

        chunks: list[Tensor] = []
        order: list[int] = []
        for key in sorted(groups):
            route, _, _ = key
            idxs = groups[key]
            members = [items[i] for i in idxs]
            visual = None
            if route == "real":
                visual = self.encode_image_batch(np.stack([m.image for m in members]))
            elif route == "pseudo":
                visual = self.complete_modality_batch([m.text for m in members])
            elif route == "zero":
                self.counters["zero_fill"] += len(members)
                visual = Tensor(np.zeros((len(members), self.cfg.n_visual_tokens, self.cfg.d_model)))
            else:
                self.counters["no_visual"] += len(members)
            chunks.append(self._backbone(members, visual))
            order.extend(idxs)

        stacked = chunks[0] if len(chunks) == 1 else ad.concat(chunks, axis=0)
        inv = np.argsort(np.asarray(order, dtype=np.int64))
        if not np.array_equal(inv, np.arange(len(items))):
            stacked = ad.take(stacked, inv)
        return stacked

    def _backbone(self, members: Sequence[ModalInput], visual: Tensor | None) -> Tensor:
        ids = np.asarray([m.text for m in members], dtype=np.int64)
        tok = ad.take(self.weight("backbone.tok_emb"), ids)
        seq = tok if visual is None else ad.concat([visual, tok], axis=1)
        length = seq.shape[1]
        seq = ad.add(seq, self._positions("backbone", length))
        h = self._stack("backbone", seq, self.cfg.n_layers, causal=True)
        last = ad.reshape(ad.narrow(h, 1, length - 1, 1), (len(members), self.cfg.d_model))
        return ad.l2_normalize(last)

    def embed(self, item: ModalInput) -> Tensor:
        """One item -> (d,) unit-norm embedding."""
        out = self.embed_batch([item])
        return ad.reshape(out, (self.cfg.d_model,))


# ---------------------------------------------------------------------------
# checkpoint: magic, u64 header length, JSON header, raw little-endian f64
# ---------------------------------------------------------------------------

def save_checkpoint(model: CompletionEmbedder, path: str | Path) -> None:
    """Single self-contained file; adapter deltas are merged into the weights."""
    state = model.effective_state()
    header = {
        "format": "modcomp-checkpoint-v1",
        "model": asdict(model.cfg),
        "padding": asdict(model.padding),
        "ablation": asdict(model.ablation),
        "tensors": [{"name": k, "shape": list(state[k].shape)} for k in sorted(state)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in sorted(state):
            fh.write(np.ascontiguousarray(state[k], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> CompletionEmbedder:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path} is truncated before the header")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    off += hlen
    try:
        cfg = ModelConfig(**header["model"])
        padding = PaddingConfig(
            prompt=tuple(header["padding"]["prompt"]),
            end_token=header["padding"]["end_token"],
            dummy_token=header["padding"]["dummy_token"],
            target_length=header["padding"]["target_length"],
        )
        ablation = AblationFlags(**header["ablation"])
        tensors = header["tensors"]
    except (KeyError, TypeError, ContractError) as e:
        raise CheckpointError(f"{path} header is incomplete: {e}") from e
    model = CompletionEmbedder(cfg, padding, ablation=ablation, seed=0)
    if sorted(t["name"] for t in tensors) != sorted(model.params):
        raise CheckpointError(f"{path} tensor names do not match the configured architecture")
    for t in tensors:
        shape = tuple(t["shape"])
        want = model.params[t["name"]].shape
        if shape != want:
            raise CheckpointError(f"{path}: tensor {t['name']} has shape {shape}, expected {want}")
        n = int(np.prod(shape)) * 8
        if off + n > len(raw):
            raise CheckpointError(f"{path} is truncated inside tensor {t['name']}")
        model.params[t["name"]].data = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(shape).copy()
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - off} trailing bytes")
    return model
