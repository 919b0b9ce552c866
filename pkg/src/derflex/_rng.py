"""Counter-based uniform random numbers shared by every simulation backend.

Each draw is a pure function of (seed, device, step, slot), so simulation
results cannot depend on thread count or on which backend executes the
loop. The mixer is two rounds of the splitmix64 finalizer applied to a
linear combination of the inputs with large odd constants.
"""
from __future__ import annotations

import numpy as np

# Draw slots per device per step. Slot 0: request Bernoulli, slot 1:
# direction choice, slot 2: constant-fraction grant, slot 3: reserved.
DRAWS_PER_STEP = 4

_A = 0x632BE59BD9B4E019
_B = 0x9E3779B97F4A7C15
_C = 0xD1B54A32D192ED03
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

_U64_A = np.uint64(_A)
_U64_B = np.uint64(_B)
_U64_C = np.uint64(_C)
_U64_M1 = np.uint64(_M1)
_U64_M2 = np.uint64(_M2)
_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def _uniform_scalar_impl(seed: np.uint64, device: np.uint64, counter: np.uint64) -> float:
    z = seed * _U64_A + device * _U64_B + counter * _U64_C
    z = (z ^ (z >> _SH30)) * _U64_M1
    z = (z ^ (z >> _SH27)) * _U64_M2
    z = (z ^ (z >> _SH30)) * _U64_M1
    z = (z ^ (z >> _SH27)) * _U64_M2
    z = z ^ (z >> _SH31)
    return (z >> _SH11) * _INV53


try:
    from numba import njit as _njit

    #: One uniform in [0, 1); compiled so jitted kernels can call it.
    uniform_scalar = _njit(cache=True, nogil=True)(_uniform_scalar_impl)
except ImportError:  # pragma: no cover - exercised only without numba
    uniform_scalar = _uniform_scalar_impl


def uniform_array(seed: int, devices: np.ndarray, counter: int) -> np.ndarray:
    """Vector of uniforms, one per entry of `devices` (uint64 indices).

    Bit-identical to calling uniform_scalar per device. Scalar products
    are taken mod 2**64 in Python ints to avoid numpy overflow warnings.
    """
    base = (int(seed) * _A + int(counter) * _C) & _MASK
    z = np.uint64(base) + devices * _U64_B
    z = (z ^ (z >> _SH30)) * _U64_M1
    z = (z ^ (z >> _SH27)) * _U64_M2
    z = (z ^ (z >> _SH30)) * _U64_M1
    z = (z ^ (z >> _SH27)) * _U64_M2
    z = z ^ (z >> _SH31)
    return (z >> _SH11) * _INV53


def step_counter(step: int, slot: int) -> int:
    """Counter value for a given simulation step and draw slot."""
    return step * DRAWS_PER_STEP + slot


def derive_seed(base_seed: int, *indices: int) -> int:
    """Deterministic child seed for replicate/signal substreams.

    Folds each index into the base seed with the same mixer, so child
    streams never depend on evaluation order.
    """
    z = int(base_seed) & _MASK
    for k, ix in enumerate(indices):
        z = (z * _A + (int(ix) + 1) * _B + (k + 1) * _C) & _MASK
        z ^= z >> 30
        z = (z * _M1) & _MASK
        z ^= z >> 27
        z = (z * _M2) & _MASK
        z ^= z >> 31
    return z
