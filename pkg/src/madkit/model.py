"""Frozen residual backbone shared by per-domain adapters, BN sets and heads."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import ADAPTER_KINDS, FACTOR_NOISE, POINTWISE_KINDS, RANKED_KINDS, init_adapter
from .errors import ConfigError, DimensionError, DomainLookupError
from .tensor import (
    BatchNormParams,
    FilterBank,
    Tensor,
    add,
    batchnorm,
    conv2d,
    global_avg_pool,
    linear,
    no_grad,
    relu,
)

BASELINE_KINDS = ("bn-only", "feature", "finetune")
DOMAIN_KINDS = ADAPTER_KINDS + BASELINE_KINDS


@dataclass(frozen=True)
class ConvSite:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def pointwise(self) -> bool:
        return self.kernel == 1


@dataclass(frozen=True)
class ResidualBlockSpec:
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus identity or 1x1 projection skip."""

    name: str
    channels_in: int
    channels_out: int
    stride: int = 1

    @property
    def projected(self) -> bool:
        return self.stride != 1 or self.channels_in != self.channels_out

    def convs(self) -> list[ConvSite]:
        sites = [
            ConvSite(f"{self.name}.conv1", self.channels_in, self.channels_out, 3, self.stride),
            ConvSite(f"{self.name}.conv2", self.channels_out, self.channels_out, 3, 1),
        ]
        if self.projected:
            sites.append(ConvSite(f"{self.name}.proj", self.channels_in, self.channels_out, 1, self.stride))
        return sites


@dataclass(frozen=True)
class BackboneSpec:
    """Stem conv followed by stages of residual blocks and global average pooling.

    The first stage keeps resolution; every later stage halves it.
    """

    in_channels: int = 3
    stem_width: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    downsample: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.stem_width < 1 or not self.widths or self.blocks_per_stage < 1:
            raise ConfigError(f"invalid backbone spec {self}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def depth(self) -> int:
        return 1 + 2 * self.blocks_per_stage * len(self.widths)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def blocks(self) -> list[ResidualBlockSpec]:
        out, prev = [], self.stem_width
        for s, width in enumerate(self.widths, start=1):
            for b in range(1, self.blocks_per_stage + 1):
                stride = 2 if (self.downsample and s > 1 and b == 1) else 1
                out.append(ResidualBlockSpec(f"s{s}b{b}", prev, width, stride))
                prev = width
        return out

    def sites(self) -> list[ConvSite]:
        sites = [ConvSite("stem", self.in_channels, self.stem_width, 3, 1)]
        for block in self.blocks():
            sites.extend(block.convs())
        return sites

    def bn_sites(self) -> list[tuple[str, int]]:
        out = [("stem.bn", self.stem_width)]
        for block in self.blocks():
            out += [(f"{block.name}.bn1", block.channels_out), (f"{block.name}.bn2", block.channels_out)]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**{**d, "widths": tuple(d.get("widths", cls.widths))})


def kaiming_filter(site: ConvSite, rng: np.random.Generator) -> np.ndarray:
    fan_in = site.in_channels * site.kernel * site.kernel
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), site.shape).astype(np.float32)


def head_init(features: int, classes: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    bound = 1.0 / math.sqrt(features)
    w = rng.uniform(-bound, bound, (classes, features))
    b = rng.uniform(-bound, bound, classes)
    return Tensor(w, True), Tensor(b, True)


@dataclass
class DomainModule:
    domain_id: str
    kind: str
    class_count: int
    adapters: dict[str, object]
    bn: dict[str, BatchNormParams]
    head_weight: Tensor
    head_bias: Tensor
    bn_trainable: bool = True
    config: dict = field(default_factory=dict)
    own_weights: dict[str, FilterBank] | None = None
    version: int = 0
    _fold_cache: dict = field(default_factory=dict, repr=False)

    def bump(self) -> None:
        """Mark parameters as changed; invalidates cached folds."""
        self.version += 1

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.own_weights is not None:
            params += [fb.weights for fb in self.own_weights.values()]
        for adapter in self.adapters.values():
            params += list(adapter.parameters().values())
        if self.bn_trainable:
            for p in self.bn.values():
                params += [p.scale, p.shift]
        params += [self.head_weight, self.head_bias]
        return params


class MultiDomainModel:
    def __init__(self, spec: BackboneSpec, backbone: dict[str, FilterBank], base_bn: dict[str, BatchNormParams]):
        self.spec = spec
        self.sites = {s.name: s for s in spec.sites()}
        if set(backbone) != set(self.sites):
            raise ConfigError("backbone weights do not match the spec's conv sites")
        for name, fb in backbone.items():
            if fb.shape != self.sites[name].shape:
                raise DimensionError(f"site {name}: weights {fb.shape} vs spec {self.sites[name].shape}")
            if not fb.frozen:
                raise ConfigError(f"backbone site {name} must be frozen")
        self.backbone = backbone
        self.base_bn = base_bn
        self.domains: dict[str, DomainModule] = {}

    @classmethod
    def initialize(cls, spec: BackboneSpec, seed: int = 0) -> "MultiDomainModel":
        """Randomly initialized (untrained) backbone with identity BN."""
        rng = np.random.default_rng(seed)
        backbone = {s.name: FilterBank(Tensor(kaiming_filter(s, rng)), frozen=True) for s in spec.sites()}
        bn = {name: BatchNormParams.identity(c, trainable=False) for name, c in spec.bn_sites()}
        return cls(spec, backbone, bn)

    # bookkeeping ----------------------------------------------------------------

    def domain(self, domain_id) -> DomainModule:
        try:
            return self.domains[str(domain_id)]
        except KeyError:
            raise DomainLookupError(f"unknown domain {domain_id!r}") from None

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.backbone):
            h.update(name.encode())
            h.update(self.backbone[name].weights.data.tobytes())
        return h.hexdigest()

    def backbone_param_count(self) -> int:
        return sum(fb.weights.size for fb in self.backbone.values())

    def adaptation_sites(self, kind: str, adapt_pointwise: bool = False) -> list[ConvSite]:
        if kind in BASELINE_KINDS:
            return []
        return [
            s for s in self.sites.values() if not s.pointwise or (adapt_pointwise and kind in POINTWISE_KINDS)
        ]

    # registration ----------------------------------------------------------------

    def register_domain(self, domain_id, adapter_kind: str, adapter_config: dict | None = None, class_count: int = 2):
        """Add a domain whose adapters start at identity and whose BN copies the base."""
        domain_id = str(domain_id)
        cfg = dict(adapter_config or {})
        if domain_id in self.domains:
            raise ConfigError(f"domain {domain_id!r} already registered")
        if adapter_kind not in DOMAIN_KINDS:
            raise ConfigError(f"unknown adapter kind {adapter_kind!r}")
        if class_count < 2:
            raise ConfigError("a domain needs at least two classes")
        if adapter_kind in RANKED_KINDS and "rank" not in cfg:
            raise ConfigError(f"{adapter_kind} needs adapter_config['rank']")
        seed = int(cfg.get("seed", 0))
        # separate streams so the head init does not depend on the adapter kind
        rng = np.random.default_rng([seed, 0])
        adapters = {}
        for site in self.adaptation_sites(adapter_kind, bool(cfg.get("adapt_pointwise", False))):
            adapters[site.name] = init_adapter(
                adapter_kind,
                (site.out_channels, site.in_channels, site.kernel),
                scheme=cfg.get("scheme", "ones"),
                rank=cfg.get("rank"),
                rng=rng,
                rank_overflow=cfg.get("rank_overflow", "error"),
                budget_split=float(cfg.get("budget_split", 0.5)),
                noise=float(cfg.get("factor_noise", FACTOR_NOISE)),
            )
        bn_trainable = adapter_kind != "feature"
        bn = {name: p.clone(trainable=bn_trainable) for name, p in self.base_bn.items()}
        w, b = head_init(self.spec.feature_dim, class_count, np.random.default_rng([seed, 1]))
        own = None
        if adapter_kind == "finetune":
            own = {n: FilterBank(Tensor(fb.weights.data, True), frozen=False) for n, fb in self.backbone.items()}
        dm = DomainModule(domain_id, adapter_kind, class_count, adapters, bn, w, b, bn_trainable, cfg, own)
        self.domains[domain_id] = dm
        return dm

    def trainable_parameters(self, domain_id) -> list[Tensor]:
        return self.domain(domain_id).parameters()

    # forward --------------------------------------------------------------------------

    def _live_weights(self, dm: DomainModule, name: str):
        base = dm.own_weights[name] if dm.own_weights is not None else self.backbone[name]
        adapter = dm.adapters.get(name)
        return base.weights if adapter is None else adapter.fold(base).weights

    def effective_weights(self, domain_id, name: str, use_cache: bool = True) -> np.ndarray:
        """Folded filter g for one site, as a float32 array (no graph)."""
        dm = self.domain(domain_id)
        key = (name, dm.version)
        if use_cache and key in dm._fold_cache:
            return dm._fold_cache[key]
        with no_grad():
            g = self._live_weights(dm, name).data
        if use_cache:
            dm._fold_cache = {k: v for k, v in dm._fold_cache.items() if k[1] == dm.version}
            dm._fold_cache[key] = g
        return g

    def folded_weights(self, domain_id) -> dict[str, np.ndarray]:
        return {name: self.effective_weights(domain_id, name).copy() for name in self.sites}

    def forward(self, domain_id, batch: Tensor, mode: str = "eval", weights: dict | None = None,
                use_cache: bool = True) -> Tensor:
        """Logits [B, classes] for ``domain_id``.

        ``mode="train"`` builds the autograd graph and (for domains with
        trainable BN) normalizes with batch statistics. ``mode="eval"``
        runs without a graph, using running BN statistics and cached folds.
        ``weights`` substitutes pre-folded banks per site, bypassing adapters.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        dm = self.domain(domain_id)
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        if batch.ndim != 4 or batch.shape[1] != self.spec.in_channels:
            raise DimensionError(f"input {batch.shape} does not match {self.spec.in_channels}-channel stem")
        if mode == "eval":
            with no_grad():
                return self._run(dm, batch, False, weights, use_cache)
        return self._run(dm, batch, dm.bn_trainable, weights, False)

    def _run(self, dm: DomainModule, x: Tensor, bn_train: bool, weights, use_cache: bool) -> Tensor:
        return linear(self._trunk(dm, x, bn_train, weights, use_cache), dm.head_weight, dm.head_bias)

    def _trunk(self, dm: DomainModule, x: Tensor, bn_train: bool, weights, use_cache: bool) -> Tensor:
        def conv(name, inp):
            site = self.sites[name]
            if weights is not None:
                w = Tensor._wrap(np.asarray(weights[name], np.float32))
            elif use_cache:
                w = Tensor._wrap(self.effective_weights(dm.domain_id, name))
            else:
                w = self._live_weights(dm, name)
            return conv2d(inp, w, site.stride, site.padding)

        def bn(name, inp):
            return batchnorm(inp, dm.bn[name], bn_train)

        h = relu(bn("stem.bn", conv("stem", x)))
        for block in self.spec.blocks():
            y = relu(bn(f"{block.name}.bn1", conv(f"{block.name}.conv1", h)))
            y = bn(f"{block.name}.bn2", conv(f"{block.name}.conv2", y))
            skip = conv(f"{block.name}.proj", h) if block.projected else h
            h = relu(add(y, skip))
        return global_avg_pool(h)

    def features(self, domain_id, batch) -> np.ndarray:
        """Pooled backbone features [B, C] in eval mode (the head's input)."""
        dm = self.domain(domain_id)
        with no_grad():
            return self._trunk(dm, batch if isinstance(batch, Tensor) else Tensor(batch), False, None, True).data
