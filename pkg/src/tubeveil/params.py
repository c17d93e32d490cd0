"""Flat named-parameter trees.

All model weights live in one dict of name -> Tensor with dotted
prefixes ("spars.0.layers.1.attn.wq").  Forward functions address their
slice through a prefix string, which keeps the optimizer, checkpoints
and parameter-isolation checks trivial.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .engine import RngState, Tensor

ParamDict = dict[str, Tensor]

__all__ = ["ParamDict", "add_param", "init_linear", "init_layer_norm",
           "init_transformer_layer", "subset", "n_params", "params_checksum",
           "copy_params"]


def add_param(params: ParamDict, name: str, value: np.ndarray) -> None:
    if name in params:
        raise ValueError(f"duplicate parameter {name!r}")
    params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)


def init_linear(params: ParamDict, prefix: str, fan_in: int, fan_out: int,
                rng: RngState, std: float = 0.02, bias: float = 0.0) -> None:
    add_param(params, f"{prefix}.w", rng.normal((fan_in, fan_out), std=std))
    add_param(params, f"{prefix}.b", np.full((fan_out,), bias, dtype=np.float32))


def init_layer_norm(params: ParamDict, prefix: str, dim: int) -> None:
    add_param(params, f"{prefix}.g", np.ones((dim,), dtype=np.float32))
    add_param(params, f"{prefix}.b", np.zeros((dim,), dtype=np.float32))


def init_transformer_layer(params: ParamDict, prefix: str, d: int, rng: RngState) -> None:
    init_layer_norm(params, f"{prefix}.ln1", d)
    for proj in ("wq", "wk", "wv", "wo"):
        add_param(params, f"{prefix}.attn.{proj}", rng.child(proj).normal((d, d), std=0.02))
    for bias in ("bq", "bk", "bv", "bo"):
        add_param(params, f"{prefix}.attn.{bias}", np.zeros((d,), dtype=np.float32))
    init_layer_norm(params, f"{prefix}.ln2", d)
    init_linear(params, f"{prefix}.ffn.fc1", d, 4 * d, rng.child("fc1"))
    init_linear(params, f"{prefix}.ffn.fc2", 4 * d, d, rng.child("fc2"))


def subset(params: ParamDict, prefix: str) -> ParamDict:
    dotted = prefix if prefix.endswith(".") else prefix + "."
    return {k: v for k, v in params.items() if k.startswith(dotted)}


def n_params(params: ParamDict) -> int:
    return sum(p.size for p in params.values())


def params_checksum(params: ParamDict) -> str:
    """Order-independent digest of every named tensor's bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def copy_params(params: ParamDict) -> ParamDict:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=v.name) for k, v in params.items()}
