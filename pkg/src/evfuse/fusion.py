"""Cross-attention fusion of the two modality streams.

Each stream queries the other: frame features attend over event features
with event-derived queries and vice versa.  The two attended streams are
then blended by a single scalar gate computed from the inner product of the
raw streams; the gate adds no learned parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .encoder import ConfigError


@dataclass
class AttentionWeights:
    """Per-head projections; h * d_k must equal the model width."""

    wq: list[Tensor]  # h x (E, d_k)
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor  # (h * d_k, E)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    def named_params(self, prefix):
        out = []
        for i in range(self.heads):
            out.append((f"{prefix}.head{i}.wq", self.wq[i]))
            out.append((f"{prefix}.head{i}.wk", self.wk[i]))
            out.append((f"{prefix}.head{i}.wv", self.wv[i]))
        out.append((f"{prefix}.wo", self.wo))
        return out


@dataclass
class FusedSequence:
    """Gated blend of the two attended streams.

    ``fused`` is exactly alpha * attended_rgb + (1 - alpha) * attended_event
    for the stored alpha.
    """

    fused: Tensor  # (..., M, E)
    alpha: Tensor  # scalar (or one per leading batch dim)


def init_attention(e_dim: int, heads: int, rng: np.random.Generator) -> AttentionWeights:
    if e_dim % heads:
        raise ConfigError(f"model width {e_dim} not divisible by {heads} heads")
    d_k = e_dim // heads
    bound = 1.0 / np.sqrt(e_dim)

    def mats():
        return [
            Tensor(rng.uniform(-bound, bound, (e_dim, d_k)), requires_grad=True)
            for _ in range(heads)
        ]

    return AttentionWeights(
        wq=mats(),
        wk=mats(),
        wv=mats(),
        wo=Tensor(rng.uniform(-bound, bound, (heads * d_k, e_dim)), requires_grad=True),
    )


def mha(q_in: Tensor, k_in: Tensor, v_in: Tensor, weights: AttentionWeights) -> Tensor:
    """Scaled dot-product multi-head attention over (..., M, E) inputs."""
    q_in, k_in, v_in = ad.astensor(q_in), ad.astensor(k_in), ad.astensor(v_in)
    e = q_in.shape[-1]
    if weights.heads * weights.d_k != e:
        raise DimensionError(
            f"attention weights cover width {weights.heads * weights.d_k}, "
            f"input has width {e}"
        )
    scale = 1.0 / np.sqrt(weights.d_k)
    heads = []
    for wq, wk, wv in zip(weights.wq, weights.wk, weights.wv):
        q = ad.matmul(q_in, wq)
        k = ad.matmul(k_in, wk)
        v = ad.matmul(v_in, wv)
        scores = ad.matmul(q, ad.swap_last2(k)) * scale
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), v))
    return ad.matmul(ad.concat(heads, axis=-1), weights.wo)


def cross_interact(
    y_rgb: Tensor,
    y_event: Tensor,
    weights_rgb: AttentionWeights,
    weights_event: AttentionWeights,
):
    """Swapped-query cross attention: each stream is the other's query.

    The rgb output attends over rgb keys/values with event-derived queries
    (through the rgb weight set), and symmetrically for the event output.
    """
    y_rgb, y_event = ad.astensor(y_rgb), ad.astensor(y_event)
    if y_rgb.shape != y_event.shape:
        raise ContractError(
            f"stream shapes must match: {y_rgb.shape} vs {y_event.shape}"
        )
    attended_rgb = mha(y_event, y_rgb, y_rgb, weights_rgb)
    attended_event = mha(y_rgb, y_event, y_event, weights_event)
    return attended_rgb, attended_event


def gate_fuse(
    y_rgb: Tensor,
    y_event: Tensor,
    attended_rgb: Tensor,
    attended_event: Tensor,
    reduction: str = "mean",
) -> FusedSequence:
    """Blend the attended streams with a parameter-free sigmoid gate.

    alpha = sigmoid(reduce(y_rgb * y_event)) where reduce averages over the
    token and feature axes by default; ``reduction='sum'`` uses the raw sum,
    whose magnitude grows with M*E and saturates the sigmoid.
    """
    tensors = [ad.astensor(t) for t in (y_rgb, y_event, attended_rgb, attended_event)]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ContractError(f"all four streams must share shape {shape}")
    y_rgb, y_event, attended_rgb, attended_event = tensors
    inner = y_rgb * y_event
    if reduction == "mean":
        pooled = ad.tmean(inner, axis=(-2, -1))
    elif reduction == "sum":
        pooled = ad.tsum(inner, axis=(-2, -1))
    else:
        raise ContractError(f"reduction must be mean|sum, got {reduction!r}")
    alpha = ad.sigmoid(pooled)
    lifted = ad.expand_dims(ad.expand_dims(alpha, -1), -1)
    fused = lifted * attended_rgb + (1.0 - lifted) * attended_event
    return FusedSequence(fused=fused, alpha=alpha)
