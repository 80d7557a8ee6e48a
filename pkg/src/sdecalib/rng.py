"""Counter-based random number streams for reproducible parallel Monte Carlo.

Each normal increment is a pure function of (seed, path, step, component), so
any chunking of the path range reproduces exactly the same numbers.  The
generator packs the coordinates into a 64-bit counter and applies two rounds
of the splitmix64 finalizer; normals come from the inverse CDF applied to the
53-bit uniform, with no rejection step.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53_SCALE = 1.0 / 9007199254740992.0  # 2**-53
_HALF_ULP = 1.0 / 18014398509481984.0  # 2**-54, keeps uniforms inside (0, 1)

MAX_STEP = 1 << 16
MAX_COMPONENT = 1 << 8


def _mix(z):
    # uint64 wraparound is the point here
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _counter(paths, step, comp):
    if not 0 <= step < MAX_STEP:
        raise ValueError(f"step {step} out of range")
    if not 0 <= comp < MAX_COMPONENT:
        raise ValueError(f"component {comp} out of range")
    p = np.asarray(paths, dtype=np.uint64)
    return p | (np.uint64(step) << np.uint64(32)) | (np.uint64(comp) << np.uint64(48))


def uniforms(seed, paths, step, comp):
    """Uniforms in the open interval (0, 1), one per path index."""
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + _GOLDEN)
        x = _mix(_mix(_counter(paths, step, comp) * _GOLDEN + key))
    return (x >> np.uint64(11)).astype(np.float64) * _U53_SCALE + _HALF_ULP


def normals(seed, paths, step, comp):
    """Standard normals keyed by (seed, path, step, component)."""
    return ndtri(uniforms(seed, paths, step, comp))


def mix_seed(seed, *tags):
    """Derive a deterministic sub-stream seed from a root seed and integer tags."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for t in tags:
        z = _mix(z * _GOLDEN + np.uint64(int(t) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
    return int(z)
