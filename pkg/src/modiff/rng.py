"""Counter-based deterministic RNG.

Every draw is a pure function of (seed, counter): the generator mixes the
counter into the seed with the splitmix64 finalizer, so replaying from the
same state always yields the same sequence, and independent streams are
cheap to fork. Uniform and integer draws are exact integer arithmetic and
therefore bit-identical everywhere; normal draws go through Box-Muller and
inherit the platform libm's rounding of log/cos (identical in practice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_TWO_NEG53 = 2.0 ** -53


def _mix_int(z: int) -> int:
    """splitmix64 finalizer on a plain Python integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 in, uint64 out; numpy unsigned arithmetic wraps mod 2^64
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _U_MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class RngState:
    """Deterministic stream state: a seed and a draw counter."""

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words; advances the counter by n."""
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix_array(np.uint64(self.seed & _MASK) + ks * _U_GOLDEN)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws in [0, 1) with 53 random bits each."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller; two raw words per draw."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._raw(2 * n)
        # u1 in (0, 1] so the log is finite
        u1 = ((raw[:n] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_NEG53
        u2 = (raw[n:] >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Integer draws in [low, high). Modulo reduction; span << 2^64."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        n = 1 if size is None else int(np.prod(size))
        v = self._raw(n) % np.uint64(high - low)
        out = v.astype(np.int64) + low
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def fork(self, key: int) -> "RngState":
        """Independent child stream; deterministic in (seed, key)."""
        child = _mix_int(_mix_int(self.seed) ^ _mix_int((key + 1) * _GOLDEN))
        return RngState(seed=child, counter=0)

    def clone(self) -> "RngState":
        return RngState(seed=self.seed, counter=self.counter)
