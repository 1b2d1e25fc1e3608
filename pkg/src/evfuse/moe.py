"""Heterogeneous mixture-of-experts head.

An attention-based router scores the fused token sequence and picks the
top-k experts; only those are evaluated, and their class logits are blended
with the renormalized routing weights.  The pool mixes three structurally
different expert designs so that heterogeneity comes from architecture, not
from dimension changes:

* deep expert   - stacked expand(4x)/compress blocks with residuals
* attention     - self-attention + residual + layer norm, then a linear map
* focal expert  - kernel-3 convolution over tokens, then a pointwise map
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import ConfigError
from .fusion import AttentionWeights, init_attention, mha

EXPERT_KINDS = ("deep", "attention", "focal")


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), w) + b, (w.shape[1],))
    return ad.matmul(x, w) + b


def _dropout(x: Tensor, rate: float, train: bool, rng) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


# ---------------------------------------------------------------------------
# router


@dataclass
class RouterParams:
    attn: AttentionWeights
    ln_gamma: Tensor
    ln_beta: Tensor
    p1_w: Tensor  # (E, E)
    p1_b: Tensor
    p2_w: Tensor  # (E, N_e)
    p2_b: Tensor

    @property
    def n_experts(self) -> int:
        return self.p2_w.shape[1]

    def named_params(self, prefix):
        return self.attn.named_params(f"{prefix}.attn") + [
            (f"{prefix}.ln_gamma", self.ln_gamma),
            (f"{prefix}.ln_beta", self.ln_beta),
            (f"{prefix}.p1_w", self.p1_w),
            (f"{prefix}.p1_b", self.p1_b),
            (f"{prefix}.p2_w", self.p2_w),
            (f"{prefix}.p2_b", self.p2_b),
        ]


@dataclass
class GateSelection:
    """Top-k routing outcome: distinct expert ids with weights summing to 1."""

    indices: tuple[int, ...]
    weights: np.ndarray


def init_router(
    e_dim: int, n_experts: int, heads: int, rng: np.random.Generator
) -> RouterParams:
    bound = 1.0 / np.sqrt(e_dim)
    return RouterParams(
        attn=init_attention(e_dim, heads, rng),
        ln_gamma=Tensor(np.ones(e_dim), requires_grad=True),
        ln_beta=Tensor(np.zeros(e_dim), requires_grad=True),
        p1_w=Tensor(rng.uniform(-bound, bound, (e_dim, e_dim)), requires_grad=True),
        p1_b=Tensor(np.zeros(e_dim), requires_grad=True),
        p2_w=Tensor(rng.uniform(-bound, bound, (e_dim, n_experts)), requires_grad=True),
        p2_b=Tensor(np.zeros(n_experts), requires_grad=True),
    )


def router_scores(tokens: Tensor, params: RouterParams) -> Tensor:
    """Expert logits for one sample: self-attention, residual, LN, pool, MLP."""
    tokens = ad.astensor(tokens)
    if tokens.shape[-2] < 1:
        raise ContractError("router needs at least one token")
    attended = mha(tokens, tokens, tokens, params.attn)
    normed = ad.layer_norm(attended + tokens, params.ln_gamma, params.ln_beta)
    pooled = ad.tmean(normed, axis=-2)
    hidden = ad.sigmoid(_linear(pooled, params.p1_w, params.p1_b))
    return _linear(hidden, params.p2_w, params.p2_b)


def _topk_from_probs(probs: np.ndarray, k: int) -> tuple[int, ...]:
    # stable sort on the negated probabilities: ties fall to the lower index
    order = np.argsort(-probs, kind="stable")
    return tuple(int(i) for i in order[:k])


def route(tokens: Tensor, params: RouterParams, k: int) -> GateSelection:
    """Pick k distinct experts by softmax probability, renormalized to 1."""
    n_e = params.n_experts
    if k > n_e:
        raise ConfigError(f"k={k} exceeds the expert count {n_e}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    probs = ad.softmax(router_scores(tokens, params), axis=-1).data
    indices = _topk_from_probs(probs, k)
    selected = probs[list(indices)]
    return GateSelection(indices=indices, weights=selected / selected.sum())


# ---------------------------------------------------------------------------
# experts


@dataclass
class DeepExpertParams:
    blocks: list[tuple[Tensor, Tensor, Tensor, Tensor]]  # (p1_w, p1_b, p2_w, p2_b)
    p3_w: Tensor  # (E, J)
    p3_b: Tensor
    dropout: float = 0.1

    def named_params(self, prefix):
        out = []
        for i, (p1w, p1b, p2w, p2b) in enumerate(self.blocks):
            out += [
                (f"{prefix}.block{i}.p1_w", p1w),
                (f"{prefix}.block{i}.p1_b", p1b),
                (f"{prefix}.block{i}.p2_w", p2w),
                (f"{prefix}.block{i}.p2_b", p2b),
            ]
        out += [(f"{prefix}.p3_w", self.p3_w), (f"{prefix}.p3_b", self.p3_b)]
        return out


@dataclass
class AttentionExpertParams:
    attn: AttentionWeights
    ln_gamma: Tensor
    ln_beta: Tensor
    proj_w: Tensor  # (E, J)
    proj_b: Tensor

    def named_params(self, prefix):
        return self.attn.named_params(f"{prefix}.attn") + [
            (f"{prefix}.ln_gamma", self.ln_gamma),
            (f"{prefix}.ln_beta", self.ln_beta),
            (f"{prefix}.proj_w", self.proj_w),
            (f"{prefix}.proj_b", self.proj_b),
        ]


@dataclass
class FocalExpertParams:
    c3_w: Tensor  # (3, E, E) token-axis conv, same padding
    c3_b: Tensor
    c1_w: Tensor  # (1, E, J) pointwise projection to classes
    c1_b: Tensor

    def named_params(self, prefix):
        return [
            (f"{prefix}.c3_w", self.c3_w),
            (f"{prefix}.c3_b", self.c3_b),
            (f"{prefix}.c1_w", self.c1_w),
            (f"{prefix}.c1_b", self.c1_b),
        ]


def init_deep_expert(e_dim, n_classes, depth, dropout, rng) -> DeepExpertParams:
    if depth < 1:
        raise ConfigError(f"deep expert depth must be >= 1, got {depth}")
    blocks = []
    wide = 4 * e_dim
    for _ in range(depth):
        b1 = 1.0 / np.sqrt(e_dim)
        b2 = 1.0 / np.sqrt(wide)
        blocks.append(
            (
                Tensor(rng.uniform(-b1, b1, (e_dim, wide)), requires_grad=True),
                Tensor(np.zeros(wide), requires_grad=True),
                Tensor(rng.uniform(-b2, b2, (wide, e_dim)), requires_grad=True),
                Tensor(np.zeros(e_dim), requires_grad=True),
            )
        )
    b3 = 1.0 / np.sqrt(e_dim)
    return DeepExpertParams(
        blocks=blocks,
        p3_w=Tensor(rng.uniform(-b3, b3, (e_dim, n_classes)), requires_grad=True),
        p3_b=Tensor(np.zeros(n_classes), requires_grad=True),
        dropout=dropout,
    )


def init_attention_expert(e_dim, n_classes, heads, rng) -> AttentionExpertParams:
    bound = 1.0 / np.sqrt(e_dim)
    return AttentionExpertParams(
        attn=init_attention(e_dim, heads, rng),
        ln_gamma=Tensor(np.ones(e_dim), requires_grad=True),
        ln_beta=Tensor(np.zeros(e_dim), requires_grad=True),
        proj_w=Tensor(rng.uniform(-bound, bound, (e_dim, n_classes)), requires_grad=True),
        proj_b=Tensor(np.zeros(n_classes), requires_grad=True),
    )


def init_focal_expert(e_dim, n_classes, rng) -> FocalExpertParams:
    b3 = 1.0 / np.sqrt(3 * e_dim)
    b1 = 1.0 / np.sqrt(e_dim)
    return FocalExpertParams(
        c3_w=Tensor(rng.uniform(-b3, b3, (3, e_dim, e_dim)), requires_grad=True),
        c3_b=Tensor(np.zeros(e_dim), requires_grad=True),
        c1_w=Tensor(rng.uniform(-b1, b1, (1, e_dim, n_classes)), requires_grad=True),
        c1_b=Tensor(np.zeros(n_classes), requires_grad=True),
    )


def conv_tokens(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channel-mixing convolution over the token axis with same padding.

    ``x``: (..., M, Ein); ``w``: (K, Ein, Eout).  Built from shifts and
    matmuls so gradients flow through the existing primitives.
    """
    k = w.shape[0]
    m = x.shape[-2]
    pad_left = (k - 1) // 2
    pad_right = k - 1 - pad_left
    parts = []
    if pad_left:
        parts.append(Tensor(np.zeros(x.shape[:-2] + (pad_left, x.shape[-1]))))
    parts.append(x)
    if pad_right:
        parts.append(Tensor(np.zeros(x.shape[:-2] + (pad_right, x.shape[-1]))))
    xp = ad.concat(parts, axis=-2) if len(parts) > 1 else x
    out = None
    for j in range(k):
        term = ad.matmul(ad.slice_axis(xp, -2, j, j + m), ad.index_axis(w, 0, j))
        out = term if out is None else out + term
    return out + b


def deep_expert(
    tokens: Tensor, params: DeepExpertParams, train: bool = False, rng=None
) -> Tensor:
    """Stacked expand/compress blocks with residuals; per-token logits pooled."""
    h = ad.astensor(tokens)
    for p1_w, p1_b, p2_w, p2_b in params.blocks:
        inner = _dropout(ad.silu(_linear(h, p1_w, p1_b)), params.dropout, train, rng)
        h = _linear(inner, p2_w, p2_b) + h
    return ad.tmean(_linear(h, params.p3_w, params.p3_b), axis=-2)


def attention_expert(tokens: Tensor, params: AttentionExpertParams) -> Tensor:
    tokens = ad.astensor(tokens)
    attended = mha(tokens, tokens, tokens, params.attn)
    normed = ad.layer_norm(attended + tokens, params.ln_gamma, params.ln_beta)
    return _linear(ad.tmean(normed, axis=-2), params.proj_w, params.proj_b)


def focal_expert(tokens: Tensor, params: FocalExpertParams) -> Tensor:
    tokens = ad.astensor(tokens)
    local = ad.silu(conv_tokens(tokens, params.c3_w, params.c3_b))
    return ad.tmean(conv_tokens(local, params.c1_w, params.c1_b), axis=-2)


# ---------------------------------------------------------------------------
# pool + integration


@dataclass
class ExpertPool:
    experts: list[tuple[str, object]]  # (kind, params) in routing order
    eval_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.eval_counts.size != len(self.experts):
            self.eval_counts = np.zeros(len(self.experts), dtype=np.int64)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def kinds(self) -> list[str]:
        return [kind for kind, _ in self.experts]

    def named_params(self, prefix):
        out = []
        for i, (kind, params) in enumerate(self.experts):
            out += params.named_params(f"{prefix}.expert{i}.{kind}")
        return out


def expert_layout(spec: str, n_experts: int) -> list[str]:
    """Expand a layout name or comma list into one kind per expert slot.

    ``heterogeneous`` deals kinds round-robin (8 experts: 3 deep,
    3 attention, 2 focal) and requires at least one of each.
    """
    spec = spec.strip()
    if spec == "heterogeneous":
        if n_experts < len(EXPERT_KINDS):
            raise ConfigError(
                f"heterogeneous layout needs >= {len(EXPERT_KINDS)} experts, "
                f"got {n_experts}"
            )
        return [EXPERT_KINDS[i % len(EXPERT_KINDS)] for i in range(n_experts)]
    if spec in EXPERT_KINDS:
        return [spec] * n_experts
    if spec == "deep+attention":
        return [("deep", "attention")[i % 2] for i in range(n_experts)]
    kinds = [s.strip() for s in spec.split(",")]
    if len(kinds) != n_experts or any(kind not in EXPERT_KINDS for kind in kinds):
        raise ConfigError(
            f"expert layout {spec!r} does not name {n_experts} valid experts"
        )
    return kinds


def init_expert_pool(
    e_dim: int,
    n_classes: int,
    layout: list[str],
    depth: int,
    dropout: float,
    heads: int,
    rng: np.random.Generator,
) -> ExpertPool:
    experts: list[tuple[str, object]] = []
    for kind in layout:
        if kind == "deep":
            experts.append((kind, init_deep_expert(e_dim, n_classes, depth, dropout, rng)))
        elif kind == "attention":
            experts.append((kind, init_attention_expert(e_dim, n_classes, heads, rng)))
        elif kind == "focal":
            experts.append((kind, init_focal_expert(e_dim, n_classes, rng)))
        else:
            raise ConfigError(f"unknown expert kind {kind!r}")
    return ExpertPool(experts=experts)


def run_expert(kind: str, params, tokens: Tensor, train: bool = False, rng=None) -> Tensor:
    if kind == "deep":
        return deep_expert(tokens, params, train=train, rng=rng)
    if kind == "attention":
        return attention_expert(tokens, params)
    if kind == "focal":
        return focal_expert(tokens, params)
    raise ConfigError(f"unknown expert kind {kind!r}")


def moe_forward(
    tokens: Tensor,
    pool: ExpertPool,
    router: RouterParams,
    k: int,
    train: bool = False,
    rng=None,
    frozen_selection: tuple[int, ...] | None = None,
) -> Tensor:
    """Class logits from the k selected experts, blended by routing weight.

    Only the selected experts run (the pool's eval_counts instrument this).
    ``frozen_selection`` pins the expert indices, keeping the blend weights
    differentiable while excluding the non-differentiable argmax itself.
    """
    tokens = ad.astensor(tokens)
    if tokens.ndim != 2:
        raise ContractError(
            f"moe_forward routes one sample at a time; got tokens {tokens.shape}"
        )
    if k > pool.n_experts:
        raise ConfigError(f"k={k} exceeds the expert count {pool.n_experts}")
    probs = ad.softmax(router_scores(tokens, router), axis=-1)
    if frozen_selection is None:
        indices = _topk_from_probs(probs.data, k)
    else:
        if len(set(frozen_selection)) != k:
            raise ContractError("frozen selection must name k distinct experts")
        indices = tuple(int(i) for i in frozen_selection)
    picked = ad.stack([ad.index_axis(probs, -1, i) for i in indices], axis=-1)
    weights = picked / ad.tsum(picked, axis=-1, keepdims=True)
    out = None
    for slot, idx in enumerate(indices):
        kind, params = pool.experts[idx]
        pool.eval_counts[idx] += 1
        logits = run_expert(kind, params, tokens, train=train, rng=rng)
        term = ad.expand_dims(ad.index_axis(weights, -1, slot), -1) * logits
        out = term if out is None else out + term
    return out
