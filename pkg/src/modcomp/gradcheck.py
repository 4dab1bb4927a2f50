"""Central finite-difference verification of every backward rule.

`grad_check` compares tape gradients against (f(x+eps) - f(x-eps)) / 2 eps
element by element. The op registry below builds randomized instances of each
differentiable op; `run_suite` sweeps them over several seeds and random
shapes. `pipeline_check` does the same for the full embed -> composite-loss
graph of a small model, sampling a few elements per parameter tensor.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DEFAULT_EPSILON = 1e-5
DEFAULT_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3
_REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    n_checked: int
    worst_index: tuple[int, int] | None = None  # (input position, flat element)
    note: str = ""

    def line(self) -> str:
        mark = "ok " if self.passed else "FAIL"
        extra = f"  [{self.note}]" if self.note else ""
        return f"{mark} {self.name:<28} max_rel_err={self.max_rel_err:.3e} n={self.n_checked}{extra}"


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [r.line() for r in self.results]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"{status}: {sum(r.passed for r in self.results)}/{len(self.results)} checks in {self.elapsed_s:.1f}s")
        return out


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               epsilon: float = DEFAULT_EPSILON, tolerance: float = DEFAULT_TOLERANCE,
               name: str = "check", sample_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> CheckResult:
    """Check d fn / d inputs for every tensor in `inputs` with requires_grad.

    `fn` must return a scalar Tensor and may close over `inputs` instead of
    using its arguments (the finite-difference side perturbs the tensors in
    place). With `sample_per_tensor` set, only that many randomly chosen
    elements per tensor are perturbed; otherwise all of them are.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = fn(*inputs)
        tape.backward(loss)

    max_rel = 0.0
    worst = None
    n_checked = 0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
            return CheckResult(name, False, float("inf"), n_checked, (pos, bad),
                               note=f"non-finite analytic gradient at input {pos} flat index {bad}")
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        if sample_per_tensor is not None and flat.size > sample_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=sample_per_tensor, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = fn(*inputs).item()
            flat[i] = orig - epsilon
            f_minus = fn(*inputs).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            if not np.isfinite(fd):
                return CheckResult(name, False, float("inf"), n_checked, (pos, int(i)),
                                   note=f"non-finite finite difference at input {pos} flat index {int(i)}")
            rel = abs(aflat[i] - fd) / max(abs(aflat[i]), abs(fd), _REL_FLOOR)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (pos, int(i))
    return CheckResult(name, max_rel <= tolerance, max_rel, n_checked, worst)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

def _w(rng, shape) -> Tensor:
    """Fixed random projection used to scalarize multi-output ops."""
    return Tensor(rng.normal(size=shape))


def _p(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_matmul_2d(rng):
    m, k, n = rng.integers(2, 6, size=3)
    a, b = _p(rng, (m, k)), _p(rng, (k, n))
    w = _w(rng, (m, n))
    return lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), w)), [a, b]


def _check_matmul_batched(rng):
    bsz, h, m, k, n = 2, 2, *rng.integers(2, 5, size=3)
    a, b = _p(rng, (bsz, h, m, k)), _p(rng, (bsz, h, k, n))
    w = _w(rng, (bsz, h, m, n))
    return lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), w)), [a, b]


def _check_add_broadcast(rng):
    m, n = rng.integers(2, 6, size=2)
    a, b = _p(rng, (m, n)), _p(rng, (n,))
    w = _w(rng, (m, n))
    return lambda a, b: ad.sum_(ad.mul(ad.add(a, b), w)), [a, b]


def _check_mul_broadcast(rng):
    m, n = rng.integers(2, 6, size=2)
    a, b = _p(rng, (m, n)), _p(rng, (m, 1))
    w = _w(rng, (m, n))
    return lambda a, b: ad.sum_(ad.mul(ad.mul(a, b), w)), [a, b]


def _check_layer_norm(rng):
    bsz, length, d = 2, int(rng.integers(2, 5)), int(rng.integers(3, 9))
    x, g, b = _p(rng, (bsz, length, d)), _p(rng, (d,)), _p(rng, (d,))
    w = _w(rng, (bsz, length, d))
    return lambda x, g, b: ad.sum_(ad.mul(ad.layer_norm(x, g, b), w)), [x, g, b]


def _check_gelu(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 7)))
    x = _p(rng, shape)
    w = _w(rng, shape)
    return lambda x: ad.sum_(ad.mul(ad.gelu(x), w)), [x]


def _check_tanh(rng):
    shape = (int(rng.integers(2, 7)),)
    x = _p(rng, shape)
    w = _w(rng, shape)
    return lambda x: ad.sum_(ad.mul(ad.tanh(x), w)), [x]


def _check_embedding_lookup(rng):
    vocab, d, length = int(rng.integers(4, 9)), int(rng.integers(3, 7)), 6
    table = _p(rng, (vocab, d))
    ids = rng.integers(0, vocab, size=length)
    ids[1] = ids[0]  # repeated id: gradient must accumulate
    w = _w(rng, (length, d))
    return lambda table: ad.sum_(ad.mul(ad.take(table, ids), w)), [table]


def _check_causal_attention(rng):
    bsz, length, d, heads = 2, int(rng.integers(2, 5)), 8, 2
    x = _p(rng, (bsz, length, d))
    ws = [_p(rng, (d, d)) for _ in range(4)]
    w = _w(rng, (bsz, length, d))

    def fn(x, wq, wk, wv, wo):
        return ad.sum_(ad.mul(ad.self_attention(x, wq, wk, wv, wo, heads, causal=True), w))

    return fn, [x, *ws]


def _check_concat(rng):
    d = int(rng.integers(2, 5))
    parts = [_p(rng, (2, int(rng.integers(1, 4)), d)) for _ in range(3)]
    total = sum(p.shape[1] for p in parts)
    w = _w(rng, (2, total, d))
    return lambda *ps: ad.sum_(ad.mul(ad.concat(ps, axis=1), w)), parts


def _check_l2_normalize(rng):
    bsz, d = int(rng.integers(2, 5)), int(rng.integers(3, 8))
    x = _p(rng, (bsz, d))
    w = _w(rng, (bsz, d))
    return lambda x: ad.sum_(ad.mul(ad.l2_normalize(x), w)), [x]


def _check_softmax(rng):
    bsz, n = int(rng.integers(2, 5)), int(rng.integers(3, 8))
    x = _p(rng, (bsz, n))
    w = _w(rng, (bsz, n))
    return lambda x: ad.sum_(ad.mul(ad.softmax(x), w)), [x]


def _check_logsumexp_diag(rng):
    n = int(rng.integers(2, 6))
    s = _p(rng, (n, n))
    return lambda s: ad.mean(ad.sub(ad.logsumexp(s), ad.diag_part(s))), [s]


def _check_cross_entropy_logits(rng):
    n = int(rng.integers(3, 8))
    logits = _p(rng, (n,))
    t = rng.random(n) + 0.1
    target = Tensor(t / t.sum())
    return lambda logits: ad.softmax_cross_entropy(logits, target), [logits]


def _check_cross_entropy_target(rng):
    # The target branch, driven through softmax so perturbed inputs stay
    # valid distributions.
    n = int(rng.integers(3, 8))
    logits = Tensor(rng.normal(size=n))
    z = _p(rng, (n,))
    return lambda z: ad.softmax_cross_entropy(logits, ad.softmax(z)), [z]


def _check_cross_entropy_rows(rng):
    bsz, n = int(rng.integers(2, 5)), int(rng.integers(3, 7))
    logits = _p(rng, (bsz, n))
    z = _p(rng, (bsz, n))
    return lambda logits, z: ad.mean(ad.softmax_cross_entropy_rows(logits, ad.softmax(z))), [logits, z]


def _check_cosine_similarity(rng):
    d = int(rng.integers(3, 9))
    a, b = _p(rng, (d,)), _p(rng, (d,))
    return lambda a, b: ad.cosine_similarity(a, b), [a, b]


def _check_shape_plumbing(rng):
    bsz, length, d = 2, 4, int(rng.integers(4, 7))
    x = _p(rng, (bsz, length, d))
    w = _w(rng, (d, 4))

    def fn(x):
        t = ad.transpose(x, (1, 0, 2))           # (L, B, d)
        t = ad.narrow(t, 0, 1, 2)                # (2, B, d)
        t = ad.reshape(t, (2 * bsz, d))
        t = ad.take(t, np.array([0, 2, 1, 1]))   # gather with a repeat
        return ad.sum_(ad.mul(ad.transpose(t), w))

    return fn, [x]


def _check_smooth_chain(rng):
    d = int(rng.integers(3, 7))
    x = _p(rng, (d,))
    return lambda x: ad.sum_(ad.log(ad.add(ad.exp(ad.scale(x, 0.5)), 1.0))), [x]


OP_CHECKS: list[tuple[str, Callable]] = [
    ("matmul_2d", _check_matmul_2d),
    ("matmul_batched", _check_matmul_batched),
    ("add_broadcast", _check_add_broadcast),
    ("mul_broadcast", _check_mul_broadcast),
    ("layer_norm", _check_layer_norm),
    ("gelu", _check_gelu),
    ("tanh", _check_tanh),
    ("embedding_lookup", _check_embedding_lookup),
    ("causal_attention", _check_causal_attention),
    ("concat_seq", _check_concat),
    ("l2_normalize", _check_l2_normalize),
    ("softmax", _check_softmax),
    ("logsumexp_diag", _check_logsumexp_diag),
    ("cross_entropy_logits", _check_cross_entropy_logits),
    ("cross_entropy_target", _check_cross_entropy_target),
    ("cross_entropy_rows", _check_cross_entropy_rows),
    ("cosine_similarity", _check_cosine_similarity),
    ("shape_plumbing", _check_shape_plumbing),
    ("smooth_chain", _check_smooth_chain),
]


def run_suite(seeds: Sequence[int] = (0, 1, 2), epsilon: float = DEFAULT_EPSILON,
              tolerance: float = DEFAULT_TOLERANCE) -> SuiteReport:
    """Every registered op, one randomized instance per seed."""
    t0 = time.perf_counter()
    report = SuiteReport()
    for seed in seeds:
        for op_name, builder in OP_CHECKS:
            rng = np.random.default_rng((seed, zlib.crc32(op_name.encode("utf-8"))))
            fn, inputs = builder(rng)
            res = grad_check(fn, inputs, epsilon=epsilon, tolerance=tolerance,
                             name=f"{op_name}[seed={seed}]")
            report.results.append(res)
    report.elapsed_s = time.perf_counter() - t0
    return report


def pipeline_check(seed: int = 0, tolerance: float = PIPELINE_TOLERANCE,
                   sample_per_tensor: int = 3) -> CheckResult:
    """Finite differences through embed -> composite loss on a small model.

    Samples a few elements of every trainable tensor rather than all of them;
    the loss mixes both modality routes (one pair with a query image, one
    text-only query) so the vision encoder, completion stack, backbone and
    both loss terms all sit on the checked path.
    """
    from .corpus import ModalInput, PairRecord
    from .model import CompletionEmbedder, ModelConfig, PaddingConfig
    from .training import LossConfig, batch_loss

    rng = np.random.default_rng((seed, 0xC0FFEE))
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, vocab_size=16,
                      n_visual_tokens=4, n_patches=4, patch_dim=5,
                      t2i_layers=1, max_text_len=8)
    # target_length > text + 2 so the dummy-token path is on the checked path,
    # and > n_visual_tokens so one batch mixes both visual widths
    padding = PaddingConfig.default(cfg.vocab_size, target_length=8)
    model = CompletionEmbedder(cfg, padding, seed=seed)
    # stop_grad_target must be off here: a detached teacher makes the analytic
    # gradient intentionally differ from the finite-difference one, which sees
    # the loss move when the teacher moves
    loss_cfg = LossConfig(temperature=0.5, aux_weight=0.3, stop_grad_target=False)

    def item(with_image: bool) -> ModalInput:
        image = rng.normal(size=(cfg.n_patches, cfg.patch_dim)) if with_image else None
        return ModalInput(instruction=(1, 2), content=tuple(rng.integers(3, cfg.vocab_size, size=2)), image=image)

    pairs = [
        PairRecord(query=item(True), positive_target=item(False), combo="TI_T",
                   task_tag="retrieval", split="IND", class_id=0),
        PairRecord(query=item(False), positive_target=item(True), combo="T_TI",
                   task_tag="retrieval", split="IND", class_id=1),
    ]
    params = model.trainable_parameters()

    def fn(*_ignored):
        loss, _, _ = batch_loss(model, pairs, loss_cfg)
        return loss

    return grad_check(fn, params, epsilon=DEFAULT_EPSILON, tolerance=tolerance,
                      name=f"pipeline[seed={seed}]", sample_per_tensor=sample_per_tensor,
                      rng=np.random.default_rng((seed, 0xFD)))


def full_report(seeds: Sequence[int] = (0, 1, 2)) -> SuiteReport:
    """Op suite plus one pipeline check per seed; what cmd_gradcheck runs."""
    report = run_suite(seeds=seeds)
    t0 = time.perf_counter()
    for seed in seeds:
        report.results.append(pipeline_check(seed=seed))
    report.elapsed_s += time.perf_counter() - t0
    return report
