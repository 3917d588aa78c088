"""Seedable, portable random source for branch draws.

The engine needs reproducible Bernoulli draws that survive serialization to
disk and reconstruction in a different process. Python's default generator has
a large, version-sensitive state, so the engine uses splitmix64: a 64-bit
state, one multiply-xorshift chain per draw, and a state that serializes to a
single 16-hex-character string.

State file format (JSON):

    {"algorithm": "splitmix64", "state": "<16 hex chars>"}
"""

from __future__ import annotations

import json

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
ALGORITHM = "splitmix64"


class SplitMix64:
    """splitmix64 generator; state is the 64-bit counter before the next draw."""

    def __init__(self, seed: int):
        if not 0 <= seed <= _MASK:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self._state = seed

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def bernoulli(self, p: float) -> bool:
        """One draw; True with probability p. Consumes exactly one u64."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {p}")
        # next_float() < 1.0 always, so p = 1 accepts every draw
        return self.next_float() < p

    @property
    def state_hex(self) -> str:
        return f"{self._state:016x}"

    @classmethod
    def from_state_hex(cls, state_hex: str) -> SplitMix64:
        if len(state_hex) != 16:
            raise ValueError(f"state must be 16 hex characters, got {state_hex!r}")
        return cls(int(state_hex, 16))

    def state_json(self) -> str:
        return json.dumps(
            {"algorithm": ALGORITHM, "state": self.state_hex},
            sort_keys=True,
            separators=(",", ":"),
        ) + "\n"

    @classmethod
    def from_state_json(cls, text: str) -> SplitMix64:
        data = json.loads(text)
        if data.get("algorithm") != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm: {data.get('algorithm')!r}")
        return cls.from_state_hex(data["state"])
