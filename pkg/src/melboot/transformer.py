"""Pre-norm transformer stack shared by the student and teacher branches.

`encoder_forward` returns the raw post-block residual stream of every layer.
The trailing layer norm is a separate step (`final_norm`) applied wherever a
consumer reads the encoder output, so the zero-weight stack is an exact
identity on its input.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import TokenSequence
from .tensor import DimensionError, ParamSet, Tensor

LN_EPS = 1e-5


def init_transformer_params(
    n_layers: int, hidden: int, heads: int, rng: np.random.Generator, dtype=np.float32
) -> ParamSet:
    if n_layers < 1:
        raise ValueError("need at least one transformer layer")
    if hidden % heads:
        raise ValueError(f"hidden {hidden} not divisible by {heads} heads")
    ps = ParamSet()

    def linear(name, n_in, n_out, bias=True):
        std = 1.0 / np.sqrt(n_in)
        ps.add(f"{name}.w", Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True, dtype=dtype))
        if bias:
            ps.add(f"{name}.b", Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype))

    def ln(name, n):
        ps.add(f"{name}.g", Tensor(np.ones(n), requires_grad=True, dtype=dtype))
        ps.add(f"{name}.b", Tensor(np.zeros(n), requires_grad=True, dtype=dtype))

    for i in range(n_layers):
        ln(f"l{i}.ln1", hidden)
        linear(f"l{i}.attn.q", hidden, hidden)
        # no key bias: softmax is invariant to a per-row logit shift, so a
        # key bias would be a dead parameter (and break gradient checks)
        linear(f"l{i}.attn.k", hidden, hidden, bias=False)
        linear(f"l{i}.attn.v", hidden, hidden)
        linear(f"l{i}.attn.o", hidden, hidden)
        ln(f"l{i}.ln2", hidden)
        linear(f"l{i}.mlp.fc1", hidden, 4 * hidden)
        linear(f"l{i}.mlp.fc2", 4 * hidden, hidden)
    ln("ln_f", hidden)
    return ps


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over [L, D] projections, per head.

    The caller applies the output projection.
    """
    if q.ndim != 2:
        raise DimensionError(f"attention expects [L, D], got {q.shape}")
    length, dim = q.shape
    if length == 0:
        raise DimensionError("attention over an empty sequence")
    if dim % heads:
        raise DimensionError(f"dim {dim} not divisible by {heads} heads")
    dh = dim // heads

    def split(x):
        return T.transpose(T.reshape(x, (length, heads, dh)), (1, 0, 2))  # [h, L, dh]

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ T.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = weights @ vh
    return T.reshape(T.transpose(ctx, (1, 0, 2)), (length, dim))


def _linear(x: Tensor, params: ParamSet, name: str) -> Tensor:
    out = x @ params[f"{name}.w"]
    if f"{name}.b" in params:
        out = out + params[f"{name}.b"]
    return out


def encoder_forward(params: ParamSet, n_layers: int, heads: int, seq: TokenSequence) -> list[Tensor]:
    """Run the stack; returns the post-block hidden states of every layer."""
    x = seq.tokens
    states: list[Tensor] = []
    for i in range(n_layers):
        h = T.layer_norm(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"], eps=LN_EPS)
        q = _linear(h, params, f"l{i}.attn.q")
        k = _linear(h, params, f"l{i}.attn.k")
        v = _linear(h, params, f"l{i}.attn.v")
        x = x + _linear(attention(q, k, v, heads), params, f"l{i}.attn.o")
        h2 = T.layer_norm(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"], eps=LN_EPS)
        x = x + _linear(T.gelu(_linear(h2, params, f"l{i}.mlp.fc1")), params, f"l{i}.mlp.fc2")
        states.append(x)
    return states


def final_norm(params: ParamSet, x: Tensor) -> Tensor:
    """Trailing layer norm producing the encoder output representation."""
    return T.layer_norm(x, params["ln_f.g"], params["ln_f.b"], eps=LN_EPS)
