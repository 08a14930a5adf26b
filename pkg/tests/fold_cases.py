"""Random small fold instances paired with their loop-nest oracle.

Shared by the adapter unit tests and the acceptance module so both run the
same 100-instance sweep per fold.
"""

import numpy as np

from madkit.adapters import (
    AdditiveFullAdapter,
    CentralScaleAdapter,
    ChannelMaskAdapter,
    FactorizedModulationAdapter,
    HybridAdapter,
    LinearCombinationAdapter,
    MaskAdapter,
    ModulationAdapter,
    ParallelAdapter,
)
from madkit.tensor import FilterBank, Tensor

from . import oracles

INSTANCES = 100
# multiplicative folds must be bit-exact; folds that sum terms get 1e-6
EXACT = {"mad", "mask", "ba2", "central"}
SUM_TOL = 1e-6


def _u(rng, *shape):
    return rng.uniform(-1, 1, shape).astype(np.float32)


def _dims(rng, min_mn=1):
    M, N = (int(v) for v in rng.integers(min_mn, 9, 2))
    return M, N, int(rng.choice([1, 3, 5]))


def _rank(rng, M, N):
    return int(rng.integers(1, min(M, N)))


def case(kind, rng):
    """Return (adapter, base weights, oracle output) for one random instance."""
    if kind in ("mad-fact", "pa-fact", "hybrid"):
        M, N, K = _dims(rng, min_mn=2)
    else:
        M, N, K = _dims(rng)
    f = _u(rng, M, N, K, K)
    if kind == "mad":
        a = _u(rng, M, N)
        return ModulationAdapter(Tensor(a)), f, oracles.fold_modulation_loops(f, a)
    if kind == "mad-fact":
        I = _rank(rng, M, N)
        b, g = _u(rng, M, I), _u(rng, I, N)
        return FactorizedModulationAdapter(Tensor(b), Tensor(g)), f, oracles.fold_factorized_loops(f, b, g)
    if kind == "pa":
        a = _u(rng, M, N)
        return ParallelAdapter(alpha=Tensor(a)), f, oracles.fold_parallel_bypass(f, a)
    if kind == "pa-fact":
        I = _rank(rng, M, N)
        b, g = _u(rng, M, I), _u(rng, I, N)
        a = (b.astype(np.float64) @ g.astype(np.float64)).astype(np.float32)
        return ParallelAdapter(beta=Tensor(b), gamma=Tensor(g)), f, oracles.fold_parallel_bypass(f, a)
    if kind in ("ra", "dan"):
        a = _u(rng, M, M)
        residual = kind == "ra"
        return LinearCombinationAdapter(Tensor(a), residual), f, oracles.fold_linear_loops(f, a, residual)
    if kind == "mask":
        m = rng.integers(0, 2, f.shape).astype(bool)
        w0, w1 = (float(v) for v in _u(rng, 2))
        return MaskAdapter(m, (w0, w1)), f, oracles.fold_mask_loops(f, m, w0, w1)
    if kind == "ba2":
        a = _u(rng, M)
        return ChannelMaskAdapter(Tensor(a)), f, oracles.fold_channel_loops(f, a)
    if kind == "central":
        a = _u(rng, M, N)
        return CentralScaleAdapter(Tensor(a)), f, oracles.fold_central_scale_loops(f, a)
    if kind == "additive":
        a = _u(rng, M, N)
        return AdditiveFullAdapter(Tensor(a)), f, oracles.fold_additive_loops(f, a)
    if kind == "hybrid":
        I1, I2 = _rank(rng, M, N), _rank(rng, M, N)
        b1, g1, b2, g2 = _u(rng, M, I1), _u(rng, I1, N), _u(rng, M, I2), _u(rng, I2, N)
        mid = oracles.fold_factorized_loops(f, b1, g1)
        a2 = (b2.astype(np.float64) @ g2.astype(np.float64)).astype(np.float32)
        adapter = HybridAdapter(
            FactorizedModulationAdapter(Tensor(b1), Tensor(g1)), ParallelAdapter(beta=Tensor(b2), gamma=Tensor(g2))
        )
        return adapter, f, oracles.fold_parallel_bypass(mid, a2)
    raise ValueError(kind)


FOLD_KINDS = ("mad", "mad-fact", "pa", "pa-fact", "ra", "dan", "mask", "ba2", "central", "additive", "hybrid")


def sweep(kind, seed=0, instances=INSTANCES):
    """Worst deviation from the oracle over ``instances`` random cases, and whether f stayed intact."""
    rng = np.random.default_rng([seed, FOLD_KINDS.index(kind)])
    worst, pure = 0.0, True
    for _ in range(instances):
        adapter, f, expected = case(kind, rng)
        bank = FilterBank(Tensor(f.copy()))
        g = adapter.fold(bank).weights.data
        pure &= bank.weights.data.tobytes() == f.tobytes()
        if kind in EXACT:
            worst = max(worst, 0.0 if g.tobytes() == expected.tobytes() else float("inf"))
        else:
            worst = max(worst, float(np.abs(g.astype(np.float64) - expected).max()))
    return worst, pure


def within_tolerance(kind, worst):
    return worst == 0.0 if kind in EXACT else worst <= SUM_TOL
