"""Multisensory transformer encoder blocks.

Each block: modality-wise layer norm, modality-wise QKV projection,
attention weights blended half-and-half with a softmax over a learned
pairwise spatial bias, output projection, and the residual update
``x + x̄ + MLP(x̄)``. The spatial bias is an MLP over the pairwise rotation
features (1 + p_i·p_j, p_i × p_j), computed once per token set and shared by
all layers and heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from . import numcore as nc
from .tokens import MODALITY_NAMES, Modality, TokenSet


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    d: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    spatial_hidden: int = 16
    use_spatial_bias: bool = True
    use_modality_ln: bool = True
    use_modality_qkv: bool = True
    use_modality_mlp: bool = False

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be non-negative")
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")


def _groups(flag):
    return [MODALITY_NAMES[m] for m in Modality] if flag else ["shared"]


def init_encoder(cfg: EncoderConfig, rng, prefix="enc") -> dict:
    d, hid = cfg.d, cfg.d * cfg.mlp_ratio
    p = {}

    def dense(name, fan_in, fan_out, gain=1.0):
        p[f"{name}.W"] = nc.parameter(rng.normal(0, gain / np.sqrt(fan_in), (fan_in, fan_out)), f"{name}.W")
        p[f"{name}.b"] = nc.parameter(np.zeros(fan_out), f"{name}.b")

    for l in range(cfg.layers):
        pre = f"{prefix}.{l}"
        for g in _groups(cfg.use_modality_ln):
            p[f"{pre}.ln.{g}.g"] = nc.parameter(np.ones(d))
            p[f"{pre}.ln.{g}.b"] = nc.parameter(np.zeros(d))
        for g in _groups(cfg.use_modality_qkv):
            dense(f"{pre}.qkv.{g}", d, 3 * d)
        dense(f"{pre}.out", d, d, gain=0.5)
        for g in _groups(cfg.use_modality_mlp):
            dense(f"{pre}.mlp1.{g}", d, hid)
            dense(f"{pre}.mlp2.{g}", hid, d, gain=0.5)
        if cfg.use_spatial_bias:
            dense(f"{pre}.sp1", 4, cfg.spatial_hidden)
            dense(f"{pre}.sp2", cfg.spatial_hidden, 1)
    return p


def per_modality(x, tokens: TokenSet, fn, modality_wise: bool):
    """Apply ``fn(slice, modality)`` to each contiguous modality block."""
    if not modality_wise:
        return fn(x, None)
    segs = tokens.segments()
    outs = [fn(nc.take(x, (slice(None), slice(a, b))), m) for m, a, b in segs]
    return outs[0] if len(outs) == 1 else nc.concat(outs, axis=1)


def spatial_bias(features, params, prefix) -> nc.Tensor:
    """B×N×N spatial similarity from B×N×N×4 rotation features (4→hidden→1 MLP)."""
    h = nc.gelu(nc.linear(features, params[f"{prefix}.sp1.W"], params[f"{prefix}.sp1.b"]))
    out = nc.linear(h, params[f"{prefix}.sp2.W"], params[f"{prefix}.sp2.b"])
    return nc.reshape(out, out.shape[:-1])


def modality_layer_norm(x, tokens: TokenSet, params, prefix, modality_wise=True):
    """Per-token layer norm with gain/bias chosen by the token's modality."""
    def fn(xs, m):
        key = f"{prefix}.ln.{MODALITY_NAMES[m]}" if m is not None else f"{prefix}.ln.shared"
        if f"{key}.g" not in params:
            raise KeyError(f"missing layer-norm parameters {key}")
        return nc.layer_norm(xs, params[f"{key}.g"], params[f"{key}.b"])
    return per_modality(x, tokens, fn, modality_wise)


def _modality_linear(x, tokens, params, name, modality_wise):
    def fn(xs, m):
        key = f"{name}.{MODALITY_NAMES[m]}" if m is not None else f"{name}.shared"
        return nc.linear(xs, params[f"{key}.W"], params[f"{key}.b"])
    return per_modality(x, tokens, fn, modality_wise)


def blended_attention(x, P, tokens: TokenSet, cfg: EncoderConfig, params, prefix, keep=None):
    """Multi-head attention with weights 0.5·(softmax(QKᵀ/√d_head) + softmax(P)).

    P is B×N×N (shared by all heads) or None for plain attention. If
    ``keep`` is a list, the B×h×N×N attention weights are appended to it.
    """
    B, N, d = x.shape
    h = cfg.heads
    if d % h:
        raise nc.ShapeError(f"width {d} not divisible by {h} heads")
    dh = d // h
    qkv = _modality_linear(x, tokens, params, f"{prefix}.qkv", cfg.use_modality_qkv)
    qkv = nc.transpose(nc.reshape(qkv, (B, N, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nc.softmax(nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)))
    if P is not None:
        sp = nc.softmax(nc.reshape(P, (B, 1, N, N)))
        att = nc.scale(nc.add(att, sp), 0.5)
    if keep is not None:
        keep.append(att.data)
    y = nc.matmul(att, v)
    y = nc.reshape(nc.transpose(y, (0, 2, 1, 3)), (B, N, d))
    return nc.linear(y, params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])


def encoder_block(x, features, tokens: TokenSet, cfg: EncoderConfig, params, prefix, keep=None):
    """x^{l+1} = x + x̄ + MLP(x̄) with x̄ the attention output of the normalised input."""
    P = spatial_bias(features, params, prefix) if cfg.use_spatial_bias else None
    xn = modality_layer_norm(x, tokens, params, prefix, cfg.use_modality_ln)
    xbar = blended_attention(xn, P, tokens, cfg, params, prefix, keep)

    def mlp(xs, m):
        g = MODALITY_NAMES[m] if m is not None else "shared"
        hdn = nc.gelu(nc.linear(xs, params[f"{prefix}.mlp1.{g}.W"], params[f"{prefix}.mlp1.{g}.b"]))
        return nc.linear(hdn, params[f"{prefix}.mlp2.{g}.W"], params[f"{prefix}.mlp2.{g}.b"])

    return nc.add(nc.add(x, xbar), per_modality(xbar, tokens, mlp, cfg.use_modality_mlp))


def encode(tokens: TokenSet, cfg: EncoderConfig, params, prefix="enc", keep=None) -> TokenSet:
    """Run all blocks; positions and modality counts pass through unchanged."""
    if tokens.d != cfg.d:
        raise nc.ShapeError(f"token width {tokens.d} != encoder width {cfg.d}")
    features = geom.pairwise_rotation_features(tokens.positions) if cfg.use_spatial_bias else None
    x = tokens.semantics
    for l in range(cfg.layers):
        x = encoder_block(x, features, tokens, cfg, params, f"{prefix}.{l}", keep)
    return TokenSet(x, tokens.positions, dict(tokens.counts))


def cls_outputs(tokens: TokenSet) -> nc.Tensor:
    """The CLS rows of an encoded token set (B×N_c×d)."""
    k = tokens.count(Modality.CLS)
    if k == 0:
        raise ValueError("token set has no CLS tokens")
    return nc.take(tokens.semantics, (slice(None), slice(0, k)))
