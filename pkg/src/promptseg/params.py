"""Named parameter collections and initializers shared by all modules.

Parameters live in a flat ``ParamStore`` mapping dotted names to Tensors.
Prefixes partition the store: ``backbone.*`` for the frozen predictor,
``adapter.*`` for the prompt-offset module, ``refiner.*`` for the boundary
refiner, ``samf.*`` for the fixed-blend baseline.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import AttentionParams, Tensor


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape: tuple[int, ...] | None = None) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape or (fan_in, fan_out)) * std).astype(np.float32)


class ParamStore(dict):
    """Ordered mapping of dotted tensor names to Tensor objects."""

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, np.float32), requires_grad=trainable, name=name)
        self[name] = t
        return t

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self if k.startswith(prefix)]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for k, v in self.items():
            if k.startswith(prefix):
                v.requires_grad = flag

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if v.requires_grad}

    def n_params(self, prefix: str = "") -> int:
        return sum(v.data.size for k, v in self.items() if k.startswith(prefix))

    def checksum(self, prefix: str = "") -> str:
        """SHA-256 over the little-endian bytes of all matching tensors,
        visited in sorted name order."""
        h = hashlib.sha256()
        for k in sorted(self):
            if k.startswith(prefix):
                h.update(k.encode())
                arr = np.ascontiguousarray(self[k].data.astype("<f4"))
                h.update(arr.tobytes())
        return h.hexdigest()


def add_linear(store: ParamStore, prefix: str, rng: np.random.Generator,
               fan_in: int, fan_out: int, zero: bool = False,
               scale: float = 1.0) -> None:
    w = np.zeros((fan_in, fan_out), np.float32) if zero else xavier(rng, fan_in, fan_out)
    if scale != 1.0:
        w = w * np.float32(scale)
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", np.zeros(fan_out, np.float32))


def add_attention(store: ParamStore, prefix: str, rng: np.random.Generator, c: int) -> None:
    for part in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{part}", xavier(rng, c, c))
    for part in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{part}", np.zeros(c, np.float32))


def add_layer_norm(store: ParamStore, prefix: str, c: int) -> None:
    store.add(f"{prefix}.g", np.ones(c, np.float32))
    store.add(f"{prefix}.b", np.zeros(c, np.float32))


def attention_view(store: ParamStore, prefix: str) -> AttentionParams:
    return AttentionParams(
        wq=store[f"{prefix}.wq"], bq=store[f"{prefix}.bq"],
        wk=store[f"{prefix}.wk"], bk=store[f"{prefix}.bk"],
        wv=store[f"{prefix}.wv"], bv=store[f"{prefix}.bv"],
        wo=store[f"{prefix}.wo"], bo=store[f"{prefix}.bo"],
    )
