"""Low-rank adapters for frozen linear layers.

An adapter adds a rank-r correction to a linear map: in column
convention, y = W x + (alpha / r) * B (A x). A starts as small
Gaussian noise and B as zeros, so a freshly attached adapter changes
nothing; training moves only A and B while W stays frozen. Merging
folds the correction back into a plain weight matrix.
"""

from __future__ import annotations

import zlib
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

INIT_STD = 0.02


class LoraAdapter:
    """Rank-r correction for one linear layer.

    ``A`` has shape (rank, d_in) and ``B`` has shape (d_out, rank);
    the applied delta is scaled by alpha / rank. ``B`` is zero at
    creation, so the adapted layer starts out exactly equal to its
    base layer.
    """

    def __init__(self, target: str, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator):
        if not isinstance(rank, int) or rank < 1:
            raise ConfigError(f"lora rank must be a positive integer, got {rank!r}")
        if alpha <= 0:
            raise ConfigError(f"lora alpha must be positive, got {alpha!r}")
        if rank > min(d_in, d_out):
            raise ConfigError(f"lora rank {rank} exceeds layer size {min(d_in, d_out)}")
        self.target = target
        self.rank = rank
        self.alpha = float(alpha)
        self.A = T.Parameter((rng.standard_normal((rank, d_in)) * INIT_STD).astype(np.float32),
                             name=f"{target}.lora.A")
        self.B = T.Parameter(np.zeros((d_out, rank), dtype=np.float32),
                             name=f"{target}.lora.B")
        self._target_was_trainable: Optional[bool] = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def apply_delta(adapter: LoraAdapter, x: T.Tensor, base: T.Tensor) -> T.Tensor:
    """Add the adapter's delta to a precomputed base output, row layout.

    ``x`` holds input rows (n, d_in) and ``base`` the base layer's
    output rows (n, d_out); this is the path the model's forward uses.
    """
    delta = T.matmul(T.matmul(x, T.transpose(adapter.A)), T.transpose(adapter.B))
    return T.add(base, T.scale(delta, adapter.scaling))


def lora_apply(W: T.Tensor, ad: LoraAdapter, x: T.Tensor) -> T.Tensor:
    """Adapted linear map y = W x + (alpha/r) * B (A x).

    ``W`` is column convention (d_out, d_in). ``x`` may be one vector
    (d_in,) giving (d_out,), or a batch of rows (n, d_in) giving
    (n, d_out).
    """
    if W.data.ndim != 2:
        raise DimensionError("W must be 2-D")
    d_out, d_in = W.shape
    if ad.A.shape != (ad.rank, d_in) or ad.B.shape != (d_out, ad.rank):
        raise DimensionError(
            f"adapter shapes A{ad.A.shape} B{ad.B.shape} do not fit W{W.shape}")
    vec = x.data.ndim == 1
    if (vec and x.shape[0] != d_in) or (not vec and x.shape[1] != d_in):
        raise DimensionError(f"input shape {x.shape} does not fit W{W.shape}")
    rows = T.concat_rows([x]) if vec else x
    out = apply_delta(ad, rows, T.matmul(rows, T.transpose(W)))
    # mean_rows over a single row is that row, turning (1, d) back to (d,).
    return T.mean_rows(out) if vec else out


def lora_merge(W: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """Fold an adapter into a column-convention weight: W + (alpha/r)BA."""
    d_out, d_in = W.shape
    if ad.A.shape != (ad.rank, d_in) or ad.B.shape != (d_out, ad.rank):
        raise ContractError(f"adapter {ad.target!r} does not fit weight shape {W.shape}")
    delta = ad.scaling * (ad.B.data.astype(np.float64) @ ad.A.data.astype(np.float64))
    return (W.astype(np.float64) + delta).astype(W.dtype)


def default_targets(n_dec_layers: int) -> List[str]:
    """Decoder self-attention query and value projections."""
    return [f"llm.{i}.attn.{part}" for i in range(n_dec_layers) for part in ("q", "v")]


def attach_targets(model, rank: int, alpha: float,
                   targets: Optional[Sequence[str]] = None,
                   seed: Optional[int] = None) -> Dict[str, LoraAdapter]:
    """Create adapters on the given linear layers and register them.

    Adapter parameters join the model's flat parameter dict under
    ``<target>.lora.A`` and ``<target>.lora.B`` so checkpointing and
    freeze control see them like any other parameter. Each target's
    base weight is flipped to frozen for the adapter's lifetime.
    """
    if targets is None:
        targets = default_targets(model.config.n_dec_layers)
    if seed is None:
        seed = model.config.seed
    for target in targets:
        if target in model.adapters:
            raise ContractError(f"adapter already attached to {target!r}")
        wname = f"{target}.weight"
        if wname not in model.params:
            raise ContractError(f"no linear layer named {target!r} to adapt")
        d_in, d_out = model.params[wname].shape
        rng = np.random.default_rng([seed, 77, zlib.crc32(target.encode())])
        adapter = LoraAdapter(target, d_in, d_out, rank, alpha, rng)
        adapter._target_was_trainable = model.params[wname].trainable
        model.params[wname].trainable = False
        model.adapters[target] = adapter
        model.params[adapter.A.name] = adapter.A
        model.params[adapter.B.name] = adapter.B
    return model.adapters


def detach_targets(model) -> None:
    """Remove every adapter and restore base trainability flags."""
    for target, adapter in list(model.adapters.items()):
        model.params[f"{target}.weight"].trainable = adapter._target_was_trainable
        del model.params[adapter.A.name]
        del model.params[adapter.B.name]
        del model.adapters[target]


def merged_state(model) -> Dict[str, np.ndarray]:
    """Model state with every adapter folded into its base weight.

    The result has no ``.lora.`` entries and loads into a fresh model
    built without adapters. Base weights are stored row-convention
    (d_in, d_out), so the merge works on their transpose.
    """
    out = {}
    for name, p in model.params.items():
        if ".lora." in name:
            continue
        out[name] = p.data.copy()
    for target, adapter in model.adapters.items():
        wname = f"{target}.weight"
        out[wname] = lora_merge(out[wname].T, adapter).T.copy()
    return out
