"""The explainer block: sigmoid channel gate, auxiliary supervision head,
and the class-to-channel product matrix shared by both host families.

One block owns a square channel mixer ``w1`` (C x C), a class head ``w2``
(n_class x C), and a learned projection that maps the host's global feature
map into the block's channel space. The gate and the supervision head share
``w1``; the class-to-channel lens is the product ``w2 @ w1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


@dataclass
class MhexParams:
    """Parameter bundle for one insertion point.

    ``proj_global`` maps global features into this block's channel space:
    a (C, C_global, 1, 1) conv kernel for image hosts or a (C_global, C)
    matrix for token hosts. ``proj_carry`` (optional) maps the previous
    block's gated output into this block's space, forming the explanation
    side-chain between consecutive blocks.
    """

    w1: Tensor
    w2: Tensor
    proj_global: Tensor | None = None
    proj_carry: Tensor | None = None

    def __post_init__(self):
        c1, c2 = self.w1.data.shape
        if c1 != c2:
            raise DimensionError(f"w1 must be square, got {self.w1.data.shape}")
        if self.w2.data.shape[1] != c1:
            raise DimensionError(
                f"w2 columns ({self.w2.data.shape[1]}) must match w1 size ({c1})")

    @property
    def n_channels(self):
        return self.w1.data.shape[0]

    @property
    def n_class(self):
        return self.w2.data.shape[0]

    def tensors(self):
        out = [self.w1, self.w2]
        if self.proj_global is not None:
            out.append(self.proj_global)
        if self.proj_carry is not None:
            out.append(self.proj_carry)
        return out


@dataclass
class MhexOutput:
    gate: Tensor          # (B, C), every entry in (0, 1)
    x_att: Tensor         # gated copy of the block input
    ds_logits: Tensor     # (B, n_class)
    relu_features: Tensor  # ReLU(x + x_global), kept for saliency


def _pool(x, pad_mask=None):
    """Channel vector from a feature tensor: spatial mean for (N,C,H,W) /
    (C,H,W), non-pad sequence mean for (B,S,D)."""
    if pad_mask is not None:
        return ad.masked_seq_mean(x, ~np.asarray(pad_mask, dtype=bool))
    return ad.global_avg_pool(x)


def _gate_broadcast(g, x):
    """Multiply per-channel gate values onto the feature tensor."""
    if x.data.ndim == 4:      # (N, C, H, W)
        return ad.mul(x, ad.reshape(g, (g.data.shape[0], g.data.shape[1], 1, 1)))
    if x.data.ndim == 3 and g.data.ndim == 2 and x.data.shape[0] == g.data.shape[0] \
            and x.data.shape[2] == g.data.shape[1]:   # tokens (B, S, D)
        return ad.mul(x, ad.reshape(g, (g.data.shape[0], 1, g.data.shape[1])))
    if x.data.ndim == 3 and g.data.ndim == 1:          # single image (C, H, W)
        return ad.mul(x, ad.reshape(g, (g.data.shape[0], 1, 1)))
    raise DimensionError(f"cannot broadcast gate {g.data.shape} onto {x.data.shape}")


def _check_shapes(x, x_global):
    # token hosts broadcast a per-sample global vector (B, 1, D) over positions
    try:
        if np.broadcast_shapes(x.data.shape, x_global.data.shape) != x.data.shape:
            raise ValueError
    except ValueError:
        raise DimensionError(
            f"block input {x.data.shape} and projected global features "
            f"{x_global.data.shape} are incompatible") from None


def attention_gate(x, x_global, params, pad_mask=None):
    """Gate values g = sigmoid(w1 . pool(x + x_global)) and the gated input
    x_att = g (.) x. For token hosts the pool is the non-pad sequence mean."""
    _check_shapes(x, x_global)
    pooled = _pool(ad.add(x, x_global), pad_mask)  # (B, C) or (C,)
    if pooled.data.ndim == 1:
        pooled = ad.reshape(pooled, (1, -1))
        g = ad.sigmoid(ad.matmul(pooled, ad.transpose(params.w1, (1, 0))))
        g = ad.reshape(g, (-1,))
    else:
        g = ad.sigmoid(ad.matmul(pooled, ad.transpose(params.w1, (1, 0))))
    return g, _gate_broadcast(g, x)


def ds_logits(x, x_global, params, pad_mask=None):
    """Supervision-head logits w2 . w1 . pool(ReLU(x + x_global)).

    The pool sits after the ReLU, so each class logit equals the spatial
    mean of that class's single-layer activation map built from the same
    rectified features. Returns (logits, relu_features).
    """
    _check_shapes(x, x_global)
    feats = ad.relu(ad.add(x, x_global))
    pooled = _pool(feats, pad_mask)
    single = pooled.data.ndim == 1
    if single:
        pooled = ad.reshape(pooled, (1, -1))
    h = ad.matmul(pooled, ad.transpose(params.w1, (1, 0)))
    logits = ad.matmul(h, ad.transpose(params.w2, (1, 0)))
    if single:
        logits = ad.reshape(logits, (-1,))
    return logits, feats


def run_block(x, x_global, params, pad_mask=None):
    """Full block evaluation: gate, gated input, supervision logits."""
    g, x_att = attention_gate(x, x_global, params, pad_mask)
    logits, feats = ds_logits(x, x_global, params, pad_mask)
    return MhexOutput(gate=g, x_att=x_att, ds_logits=logits, relu_features=feats)


def equivalent_matrix(params):
    """The (n_class, C) product w2 @ w1 read directly from parameter data."""
    return params.w2.data @ params.w1.data


def mhex_loss(head_logits, targets, mode):
    """Combined loss over every head (auxiliary heads plus the host's final
    head). ``pretrain`` applies cross-entropy to the elementwise sum of all
    logit vectors; ``finetune`` sums per-head cross-entropies."""
    if not head_logits:
        raise ContractError("mhex_loss: empty head list")
    if mode == "pretrain":
        total = head_logits[0]
        for h in head_logits[1:]:
            total = ad.add(total, h)
        return ad.softmax_cross_entropy(total, targets)
    if mode == "finetune":
        loss = ad.softmax_cross_entropy(head_logits[0], targets)
        for h in head_logits[1:]:
            loss = ad.add(loss, ad.softmax_cross_entropy(h, targets))
        return loss
    raise ContractError(f"unknown loss mode {mode!r}")
