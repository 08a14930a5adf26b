"""Per-domain adapters expressed as folds of a frozen filter bank.

Every adapter turns a base bank ``f`` of shape [M, N, K, K] into an
effective bank ``g`` for its domain. Folds are pure: ``f`` is never
written, and the result is built from differentiable tensor ops so the
adapter parameters can be trained through it.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

from . import blob
from .errors import ConfigError, DimensionError, FormatError
from .tensor import FilterBank, Tensor, add, make_op, matmul, mul, reshape

FACTOR_NOISE = 0.01
LOW_INIT = 0.15


def _bank(weights: Tensor) -> FilterBank:
    return FilterBank(weights, frozen=False)


def _center(kernel: int) -> int:
    if kernel % 2 == 0:
        raise ConfigError(f"central-element adapters need odd K, got K={kernel}")
    return (kernel - 1) // 2


def _param(x, trainable: bool = True) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, trainable)


def _check_mn(f: FilterBank, alpha: Tensor, what: str) -> None:
    if alpha.shape != (f.out_channels, f.in_channels):
        raise DimensionError(f"{what}: alpha {alpha.shape} vs filter bank {f.shape}")


# fold kernels ---------------------------------------------------------------


def _add_center(w: Tensor, alpha: Tensor) -> Tensor:
    c = _center(w.shape[2])
    out = w.data.copy()
    out[:, :, c, c] += alpha.data

    def backward(g):
        return g, g[:, :, c, c]

    return make_op(out, (w, alpha), backward, "add_center")


def _scale_center(w: Tensor, alpha: Tensor) -> Tensor:
    c = _center(w.shape[2])
    out = w.data.copy()
    out[:, :, c, c] *= alpha.data

    def backward(g):
        gw = None
        if w.requires_grad:
            gw = g.copy()
            gw[:, :, c, c] *= alpha.data
        return gw, g[:, :, c, c] * w.data[:, :, c, c]

    return make_op(out, (w, alpha), backward, "scale_center")


def fold_modulation(f: FilterBank, a: "ModulationAdapter") -> FilterBank:
    """g[m, n, k, l] = alpha[m, n] * f[m, n, k, l]."""
    _check_mn(f, a.alpha, "fold_modulation")
    M, N = a.alpha.shape
    return _bank(mul(f.weights, reshape(a.alpha, (M, N, 1, 1))))


def fold_factorized(f: FilterBank, a: "FactorizedModulationAdapter") -> FilterBank:
    """Modulation by the rank-I product beta @ gamma."""
    _check_rank(a.intermediate_dim, f.out_channels, f.in_channels)
    if a.beta.shape[0] != f.out_channels or a.gamma.shape[1] != f.in_channels:
        raise DimensionError(f"fold_factorized: factors {a.beta.shape} x {a.gamma.shape} vs {f.shape}")
    alpha = matmul(a.beta, a.gamma)
    return _bank(mul(f.weights, reshape(alpha, alpha.shape + (1, 1))))


def fold_parallel(f: FilterBank, a: "ParallelAdapter") -> FilterBank:
    """Add alpha to the central spatial element; every other entry is untouched."""
    _center(f.kernel)
    alpha = a.alpha_tensor()
    _check_mn(f, alpha, "fold_parallel")
    return _bank(_add_center(f.weights, alpha))


def fold_linear(f: FilterBank, a: "LinearCombinationAdapter") -> FilterBank:
    """g[m] = sum_i alpha[m, i] f[i], with an identity skip when residual."""
    M = f.out_channels
    if a.alpha.ndim != 2 or a.alpha.shape[0] != a.alpha.shape[1]:
        raise DimensionError(f"fold_linear: alpha must be square, got {a.alpha.shape}")
    if a.alpha.shape[0] != M:
        raise DimensionError(f"fold_linear: alpha {a.alpha.shape} vs {M} output channels")
    mix = add(a.alpha, np.eye(M, dtype=np.float32)) if a.residual else a.alpha
    flat = matmul(mix, reshape(f.weights, (M, -1)))
    return _bank(reshape(flat, f.shape))


def fold_mask(f: FilterBank, a: "MaskAdapter") -> FilterBank:
    """g = (mask ? w1 : w0) * f, elementwise."""
    if a.mask.shape != f.shape:
        raise DimensionError(f"fold_mask: mask {a.mask.shape} vs filter bank {f.shape}")
    w0, w1 = np.float32(a.value_pair[0]), np.float32(a.value_pair[1])
    scale = np.where(a.mask, w1, w0).astype(np.float32)
    return _bank(mul(f.weights, scale))


def fold_channel(f: FilterBank, a: "ChannelMaskAdapter") -> FilterBank:
    """Scale each output-channel slice of f by alpha[m]."""
    if a.alpha.shape != (f.out_channels,):
        raise DimensionError(f"fold_channel: alpha {a.alpha.shape} vs {f.out_channels} outputs")
    return _bank(mul(f.weights, reshape(a.alpha, (f.out_channels, 1, 1, 1))))


def fold_central_scale(f: FilterBank, a: "CentralScaleAdapter") -> FilterBank:
    """Multiply only the central spatial element of each (m, n) kernel by alpha[m, n]."""
    _check_mn(f, a.alpha, "fold_central_scale")
    return _bank(_scale_center(f.weights, a.alpha))


def fold_additive_full(f: FilterBank, a: "AdditiveFullAdapter") -> FilterBank:
    """g[m, n, k, l] = f[m, n, k, l] + alpha[m, n] at every spatial position."""
    _check_mn(f, a.alpha, "fold_additive_full")
    M, N = a.alpha.shape
    return _bank(add(f.weights, reshape(a.alpha, (M, N, 1, 1))))


def fold_hybrid(f: FilterBank, a: "HybridAdapter") -> FilterBank:
    """Modulate first, then add the parallel (central-element) term."""
    return a.pa.fold(a.mad.fold(f))


def fold(f: FilterBank, adapter) -> FilterBank:
    return adapter.fold(f)


# adapter types ---------------------------------------------------------------


def _check_rank(rank: int, M: int, N: int) -> None:
    if not 1 <= rank < min(M, N):
        raise ConfigError(f"intermediate dimension I={rank} must satisfy 1 <= I < min(M, N) = {min(M, N)}")


@dataclass
class ModulationAdapter:
    alpha: Tensor
    kind: ClassVar[str] = "mad"

    def __post_init__(self):
        self.alpha = _param(self.alpha)

    def fold(self, f):
        return fold_modulation(f, self)

    def parameters(self):
        return {"alpha": self.alpha}

    def effective_alpha(self) -> np.ndarray:
        return self.alpha.data

    @property
    def num_params(self) -> int:
        return self.alpha.size


@dataclass
class FactorizedModulationAdapter:
    beta: Tensor
    gamma: Tensor
    kind: ClassVar[str] = "mad-fact"

    def __post_init__(self):
        self.beta, self.gamma = _param(self.beta), _param(self.gamma)
        if self.beta.ndim != 2 or self.gamma.ndim != 2 or self.beta.shape[1] != self.gamma.shape[0]:
            raise DimensionError(f"factor shapes {self.beta.shape} and {self.gamma.shape} do not chain")
        _check_rank(self.intermediate_dim, self.beta.shape[0], self.gamma.shape[1])

    @property
    def intermediate_dim(self) -> int:
        return self.beta.shape[1]

    def fold(self, f):
        return fold_factorized(f, self)

    def parameters(self):
        return {"beta": self.beta, "gamma": self.gamma}

    def effective_alpha(self) -> np.ndarray:
        return (self.beta.data.astype(np.float64) @ self.gamma.data.astype(np.float64)).astype(np.float32)

    @property
    def num_params(self) -> int:
        return self.beta.size + self.gamma.size


@dataclass
class ParallelAdapter:
    """Central-element additive adapter, optionally stored as beta @ gamma."""

    alpha: Tensor | None = None
    beta: Tensor | None = None
    gamma: Tensor | None = None

    def __post_init__(self):
        if (self.alpha is None) == (self.beta is None or self.gamma is None):
            raise ConfigError("ParallelAdapter needs either alpha or both factors")
        if self.alpha is not None:
            self.alpha = _param(self.alpha)
        else:
            self.beta, self.gamma = _param(self.beta), _param(self.gamma)
            if self.beta.shape[1] != self.gamma.shape[0]:
                raise DimensionError(f"factor shapes {self.beta.shape} and {self.gamma.shape} do not chain")
            _check_rank(self.intermediate_dim, self.beta.shape[0], self.gamma.shape[1])

    @property
    def kind(self) -> str:
        return "pa" if self.alpha is not None else "pa-fact"

    @property
    def factorized(self) -> bool:
        return self.alpha is None

    @property
    def intermediate_dim(self) -> int | None:
        return None if self.alpha is not None else self.beta.shape[1]

    def alpha_tensor(self) -> Tensor:
        return self.alpha if self.alpha is not None else matmul(self.beta, self.gamma)

    def fold(self, f):
        return fold_parallel(f, self)

    def parameters(self):
        if self.alpha is not None:
            return {"alpha": self.alpha}
        return {"beta": self.beta, "gamma": self.gamma}

    def effective_alpha(self) -> np.ndarray:
        if self.alpha is not None:
            return self.alpha.data
        return (self.beta.data.astype(np.float64) @ self.gamma.data.astype(np.float64)).astype(np.float32)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


@dataclass
class LinearCombinationAdapter:
    alpha: Tensor
    residual: bool = True

    def __post_init__(self):
        self.alpha = _param(self.alpha)

    @property
    def kind(self) -> str:
        return "ra" if self.residual else "dan"

    def fold(self, f):
        return fold_linear(f, self)

    def parameters(self):
        return {"alpha": self.alpha}

    def effective_alpha(self) -> np.ndarray:
        return self.alpha.data

    @property
    def num_params(self) -> int:
        return self.alpha.size


@dataclass
class MaskAdapter:
    """Fixed binary mask with an affine value pair; nothing here is trained."""

    mask: np.ndarray
    value_pair: tuple[float, float] = (0.0, 1.0)
    kind: ClassVar[str] = "mask"

    def __post_init__(self):
        m = np.asarray(getattr(self.mask, "data", self.mask))
        if not np.isin(m, (0, 1)).all():
            raise ConfigError("mask entries must be 0 or 1")
        self.mask = m.astype(bool)
        self.value_pair = (float(self.value_pair[0]), float(self.value_pair[1]))

    def fold(self, f):
        return fold_mask(f, self)

    def parameters(self):
        return {}

    def effective_alpha(self) -> np.ndarray:
        raise ConfigError("element masks have no [M, N] adapter matrix")

    @property
    def num_params(self) -> int:
        return 0

    @property
    def mask_bits(self) -> int:
        return int(self.mask.size)


@dataclass
class ChannelMaskAdapter:
    alpha: Tensor
    kind: ClassVar[str] = "ba2"

    def __post_init__(self):
        self.alpha = _param(self.alpha)

    def fold(self, f):
        return fold_channel(f, self)

    def parameters(self):
        return {"alpha": self.alpha}

    def effective_alpha(self) -> np.ndarray:
        return self.alpha.data.reshape(-1, 1)

    @property
    def num_params(self) -> int:
        return self.alpha.size


@dataclass
class CentralScaleAdapter:
    alpha: Tensor
    kind: ClassVar[str] = "central"

    def __post_init__(self):
        self.alpha = _param(self.alpha)

    def fold(self, f):
        return fold_central_scale(f, self)

    def parameters(self):
        return {"alpha": self.alpha}

    def effective_alpha(self) -> np.ndarray:
        return self.alpha.data

    @property
    def num_params(self) -> int:
        return self.alpha.size


@dataclass
class AdditiveFullAdapter:
    alpha: Tensor
    kind: ClassVar[str] = "additive"

    def __post_init__(self):
        self.alpha = _param(self.alpha)

    def fold(self, f):
        return fold_additive_full(f, self)

    def parameters(self):
        return {"alpha": self.alpha}

    def effective_alpha(self) -> np.ndarray:
        return self.alpha.data

    @property
    def num_params(self) -> int:
        return self.alpha.size


@dataclass
class HybridAdapter:
    mad: FactorizedModulationAdapter | ModulationAdapter
    pa: ParallelAdapter
    budget_split: float = 0.5
    kind: ClassVar[str] = "hybrid"

    def __post_init__(self):
        if not 0.0 < self.budget_split < 1.0:
            raise ConfigError(f"budget_split must lie in (0, 1), got {self.budget_split}")
        m_shape = self.mad.effective_alpha().shape
        if m_shape != self.pa.effective_alpha().shape:
            raise DimensionError("hybrid sub-adapters disagree on (M, N)")

    def fold(self, f):
        return fold_hybrid(f, self)

    def parameters(self):
        out = {f"mad.{k}": v for k, v in self.mad.parameters().items()}
        out.update({f"pa.{k}": v for k, v in self.pa.parameters().items()})
        return out

    def effective_alpha(self) -> np.ndarray:
        return self.mad.effective_alpha()

    @property
    def num_params(self) -> int:
        return self.mad.num_params + self.pa.num_params


ADAPTER_KINDS = ("mad", "mad-fact", "pa", "pa-fact", "ra", "dan", "mask", "ba2", "central", "additive", "hybrid")
RANKED_KINDS = ("mad-fact", "pa-fact", "hybrid")
# kinds whose fold is defined for any (M, N, K), so 1x1 projections may be adapted
POINTWISE_KINDS = ("mad", "mad-fact", "mask")


# initialization ---------------------------------------------------------------


def hybrid_split(budget: float, M: int, N: int, split: float = 0.5) -> tuple[int, int]:
    """Largest (I_mad, I_pa) with I_mad (M+N) <= split*P and I_pa (M+N) <= (1-split)*P."""
    quantum = M + N
    return int(math.floor(split * budget / quantum)), int(math.floor((1 - split) * budget / quantum))


def _factor_init(M: int, N: int, rank: int, rng: np.random.Generator, noise: float):
    c = 1.0 / math.sqrt(rank)
    amp = noise * c
    beta = np.full((M, rank), c) + (rng.uniform(-amp, amp, (M, rank)) if noise else 0.0)
    gamma = np.full((rank, N), c) + (rng.uniform(-amp, amp, (rank, N)) if noise else 0.0)
    return Tensor(beta, True), Tensor(gamma, True)


def _zero_factor_init(M: int, N: int, rank: int, rng: np.random.Generator):
    bound = 1.0 / math.sqrt(rank)
    return Tensor(np.zeros((M, rank)), True), Tensor(rng.uniform(-bound, bound, (rank, N)), True)


def init_adapter(
    kind: str,
    shape: tuple[int, int, int],
    scheme: str = "ones",
    rank: int | None = None,
    rng: np.random.Generator | None = None,
    noise: float = FACTOR_NOISE,
    rank_overflow: str = "error",
    budget_split: float = 0.5,
):
    """Build an adapter of ``kind`` for a site of shape (M, N, K) in its identity state.

    ``scheme`` is "ones" (alpha = 1) or "low" (alpha = 0.15) for modulation
    adapters. For factorized kinds, ``rank_overflow="full"`` substitutes the
    unfactorized adapter at sites where ``rank >= min(M, N)`` instead of
    raising.
    """
    M, N, K = shape
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}")
    if scheme not in ("ones", "low"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if rank_overflow not in ("error", "full"):
        raise ConfigError(f"rank_overflow must be 'error' or 'full', got {rank_overflow!r}")

    def overflow(r: int) -> bool:
        if r is None or r < 1:
            raise ConfigError(f"{kind} needs a rank I >= 1, got {r}")
        if r >= min(M, N):
            if rank_overflow == "error":
                _check_rank(r, M, N)
            return True
        return False

    mod_value = 1.0 if scheme == "ones" else LOW_INIT
    if kind == "mad":
        return ModulationAdapter(Tensor(np.full((M, N), mod_value), True))
    if kind == "mad-fact":
        if overflow(rank):
            return ModulationAdapter(Tensor(np.full((M, N), mod_value), True))
        beta, gamma = _factor_init(M, N, rank, rng, noise)
        if scheme == "low":
            beta = Tensor(beta.data * LOW_INIT, True)
        return FactorizedModulationAdapter(beta, gamma)
    if kind == "pa":
        return ParallelAdapter(alpha=Tensor(np.zeros((M, N)), True))
    if kind == "pa-fact":
        if overflow(rank):
            return ParallelAdapter(alpha=Tensor(np.zeros((M, N)), True))
        beta, gamma = _zero_factor_init(M, N, rank, rng)
        return ParallelAdapter(beta=beta, gamma=gamma)
    if kind == "ra":
        return LinearCombinationAdapter(Tensor(np.zeros((M, M)), True), residual=True)
    if kind == "dan":
        return LinearCombinationAdapter(Tensor(np.eye(M), True), residual=False)
    if kind == "mask":
        return MaskAdapter(np.ones((M, N, K, K), bool), (0.0, 1.0))
    if kind == "ba2":
        return ChannelMaskAdapter(Tensor(np.ones(M), True))
    if kind == "central":
        return CentralScaleAdapter(Tensor(np.ones((M, N)), True))
    if kind == "additive":
        return AdditiveFullAdapter(Tensor(np.zeros((M, N)), True))
    # hybrid: rank sets the per-site budget P = rank * (M + N)
    if rank is None or rank < 1:
        raise ConfigError(f"hybrid needs a rank I >= 1, got {rank}")
    i_mad, i_pa = hybrid_split(rank * (M + N), M, N, budget_split)
    if i_mad < 1 or i_pa < 1:
        raise ConfigError(f"budget I={rank} too small to split between two factorized adapters")
    mad = init_adapter("mad-fact", shape, scheme, i_mad, rng, noise, rank_overflow)
    pa = init_adapter("pa-fact", shape, scheme, i_pa, rng, noise, rank_overflow)
    return HybridAdapter(mad, pa, budget_split)


# analysis -------------------------------------------------------------------------


def numerical_rank(matrix: np.ndarray, rel_tol: float = 1e-5) -> int:
    s = np.linalg.svd(np.asarray(matrix, np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rel_tol * s[0]).sum())


@dataclass
class SparsityReport:
    heatmap: np.ndarray
    sparsity: float
    numerical_rank: int
    threshold: float = field(default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.heatmap, delimiter=",", fmt="%.9g")
        return buf.getvalue()

    def to_pgm(self) -> bytes:
        """8-bit binary PGM (P5): width = input channels, height = output channels."""
        h = self.heatmap
        peak = h.max() if h.size else 0.0
        pix = np.zeros(h.shape, np.uint8) if peak <= 0 else np.rint(255.0 * h / peak).astype(np.uint8)
        rows, cols = pix.shape
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes()


def sparsity_report(adapter, threshold_fraction: float = 0.1) -> SparsityReport:
    """Magnitude heatmap of the effective adapter matrix (rows = output channels).

    An entry counts as sparse when ``|alpha| < threshold_fraction * mean(|alpha|)``.
    """
    alpha = np.abs(np.asarray(adapter.effective_alpha(), np.float64))
    thr = threshold_fraction * alpha.mean()
    return SparsityReport(
        heatmap=alpha,
        sparsity=float((alpha < thr).mean()),
        numerical_rank=numerical_rank(alpha),
        threshold=float(thr),
    )


def read_pgm(payload: bytes) -> np.ndarray:
    """Parse a P5 PGM as written by ``SparsityReport.to_pgm``."""
    parts = payload.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError("not a binary P5 PGM")
    cols, rows = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255 or len(parts[3]) != rows * cols:
        raise FormatError("PGM header does not match pixel payload")
    return np.frombuffer(parts[3], np.uint8).reshape(rows, cols)


# checkpoint --------------------------------------------------------------------------


def adapter_header(adapter, dims: tuple[int, int, int], scheme: str = "ones") -> dict:
    head = {"kind": adapter.kind, "dims": list(dims), "scheme": scheme}
    if isinstance(adapter, FactorizedModulationAdapter) or (
        isinstance(adapter, ParallelAdapter) and adapter.factorized
    ):
        head["I"] = adapter.intermediate_dim
    if isinstance(adapter, MaskAdapter):
        head["value_pair"] = list(adapter.value_pair)
    if isinstance(adapter, HybridAdapter):
        head["budget_split"] = adapter.budget_split
        head["mad"] = adapter_header(adapter.mad, dims, scheme)
        head["pa"] = adapter_header(adapter.pa, dims, scheme)
    return head


def _tensors_for_file(adapter) -> dict[str, np.ndarray]:
    if isinstance(adapter, MaskAdapter):
        return {"mask": adapter.mask.astype(np.float32)}
    return {k: v.data for k, v in adapter.parameters().items()}


def encode_adapter(adapter, dims: tuple[int, int, int], scheme: str = "ones") -> bytes:
    """One JSON header line followed by an MDLT blob per parameter, in header order."""
    tensors = _tensors_for_file(adapter)
    head = adapter_header(adapter, dims, scheme)
    head["params"] = list(tensors)
    line = json.dumps(head, sort_keys=True).encode("utf-8") + b"\n"
    return line + b"".join(blob.encode(t) for t in tensors.values())


def _build(head: dict, tensors: dict[str, np.ndarray], trainable: bool = True):
    kind = head["kind"]
    T = lambda name: Tensor(tensors[name], trainable)  # noqa: E731
    if kind == "mad":
        return ModulationAdapter(T("alpha"))
    if kind == "mad-fact":
        return FactorizedModulationAdapter(T("beta"), T("gamma"))
    if kind == "pa":
        return ParallelAdapter(alpha=T("alpha"))
    if kind == "pa-fact":
        return ParallelAdapter(beta=T("beta"), gamma=T("gamma"))
    if kind in ("ra", "dan"):
        return LinearCombinationAdapter(T("alpha"), residual=(kind == "ra"))
    if kind == "mask":
        return MaskAdapter(tensors["mask"].astype(bool), tuple(head["value_pair"]))
    if kind == "ba2":
        return ChannelMaskAdapter(T("alpha"))
    if kind == "central":
        return CentralScaleAdapter(T("alpha"))
    if kind == "additive":
        return AdditiveFullAdapter(T("alpha"))
    if kind == "hybrid":
        sub = lambda prefix: {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".")}  # noqa: E731
        return HybridAdapter(
            _build(head["mad"], sub("mad"), trainable), _build(head["pa"], sub("pa"), trainable), head["budget_split"]
        )
    raise FormatError(f"unknown adapter kind {kind!r} in checkpoint")


def decode_adapter(payload: bytes):
    """Inverse of ``encode_adapter``; returns (adapter, header)."""
    newline = payload.find(b"\n")
    if newline < 0:
        raise FormatError("adapter file has no JSON header line")
    try:
        head = json.loads(payload[:newline])
    except ValueError as exc:
        raise FormatError(f"bad adapter header: {exc}") from None
    stream = io.BytesIO(payload[newline + 1 :])
    tensors = {name: blob.read_from(stream) for name in head.get("params", [])}
    if stream.read(1):
        raise FormatError("trailing bytes in adapter file")
    return _build(head, tensors), head


def save_adapter(path, adapter, dims, scheme: str = "ones") -> None:
    blob.atomic_write(path, encode_adapter(adapter, dims, scheme))


def load_adapter(path):
    return decode_adapter(Path(path).read_bytes())
