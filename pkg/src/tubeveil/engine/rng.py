"""Counter-based random streams.

Built on numpy's Philox generator, which is keyed and counter-based, so
a stream is a pure function of (seed, derivation path) and independent
of thread count or call interleaving elsewhere.  Substreams are derived
by hashing the parent key with a label, which makes per-sample and
per-step noise reproducible without any global state.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngState", "GUMBEL_CLAMP_EPS"]

GUMBEL_CLAMP_EPS = 1e-10


def _key_from_seed(seed: int) -> bytes:
    return hashlib.blake2b(int(seed).to_bytes(8, "little", signed=False), digest_size=16).digest()


def _derive(key: bytes, label: str) -> bytes:
    return hashlib.blake2b(key + label.encode("utf-8"), digest_size=16).digest()


class RngState:
    """One deterministic random stream with cheap labeled substreams."""

    def __init__(self, seed: int = 0, _key: bytes | None = None):
        self.seed = int(seed)
        self._key = _key if _key is not None else _key_from_seed(seed)
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(self._key, "little")))

    def child(self, label: str) -> "RngState":
        """An independent stream derived from this one by label."""
        return RngState(self.seed, _key=_derive(self._key, label))

    def stream(self, index: int) -> "RngState":
        return self.child(f"#{int(index)}")

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0, dtype=np.float32) -> np.ndarray:
        u = self._gen.random(size=shape, dtype=np.float64)
        return (lo + (hi - lo) * u).astype(dtype)

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape, dtype=np.float64) * std).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_mask(self, n: int, k: int) -> np.ndarray:
        """Boolean mask with exactly k of n entries set."""
        mask = np.zeros(n, dtype=bool)
        mask[self._gen.permutation(n)[:k]] = True
        return mask

    def gumbel(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard Gumbel samples g = -log(-log u), u clamped away from {0, 1}."""
        u = self._gen.random(size=shape, dtype=np.float64)
        u = np.clip(u, GUMBEL_CLAMP_EPS, 1.0 - GUMBEL_CLAMP_EPS)
        return (-np.log(-np.log(u))).astype(dtype)

    # checkpointing support: the full generator state round-trips exactly
    def get_state(self) -> dict:
        state = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "key_hex": self._key.hex(),
            "counter": [int(v) for v in state["state"]["counter"]],
            "philox_key": [int(v) for v in state["state"]["key"]],
            "buffer": [int(v) for v in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def set_state(self, snapshot: dict) -> None:
        self.seed = int(snapshot["seed"])
        self._key = bytes.fromhex(snapshot["key_hex"])
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(self._key, "little")))
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snapshot["counter"], dtype=np.uint64),
                "key": np.array(snapshot["philox_key"], dtype=np.uint64),
            },
            "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
            "buffer_pos": snapshot["buffer_pos"],
            "has_uint32": snapshot["has_uint32"],
            "uinteger": snapshot["uinteger"],
        }

    @classmethod
    def from_state(cls, snapshot: dict) -> "RngState":
        rng = cls(snapshot["seed"])
        rng.set_state(snapshot)
        return rng
