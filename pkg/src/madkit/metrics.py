"""Decathlon score, parameter budgets, mask storage and average rank."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import (
    FactorizedModulationAdapter,
    HybridAdapter,
    MaskAdapter,
    ParallelAdapter,
)
from .errors import ConfigError, DataError

DEFAULT_EXPONENT = 2.0
PERFECT_SCORE = 1000.0
MASK_SCALAR_BYTES = 8  # the (w0, w1) pair as two float32


# decathlon score -------------------------------------------------------------------


@dataclass
class ScoreConfig:
    """Per-domain baseline errors; weight a_d = 1000 * e_max ** -b gives 1000 at zero error."""

    e_max: dict[str, float]
    exponent: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for d, e in self.e_max.items():
            if not e > 0:
                raise ConfigError(f"baseline error for {d!r} must be > 0, got {e}")
            if e > 1:
                raise ConfigError(f"baseline error for {d!r} must be <= 1, got {e}")

    def b(self, domain: str) -> float:
        return float(self.exponent.get(domain, DEFAULT_EXPONENT))

    def weight(self, domain: str) -> float:
        return PERFECT_SCORE * self.e_max[domain] ** (-self.b(domain))

    @classmethod
    def from_finetune_errors(cls, errors: dict[str, float]) -> "ScoreConfig":
        """Baseline error = twice the fully finetuned model's error (capped at 1)."""
        e = {}
        for d, err in errors.items():
            if not err > 0:
                raise ConfigError(f"finetune error for {d!r} is {err}; the baseline error would be 0")
            e[d] = min(1.0, 2.0 * err)
        return cls(e)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreConfig":
        e_max, b = {}, {}
        for dom, v in d.items():
            if isinstance(v, dict):
                e_max[dom] = float(v["e_max"])
                if "b" in v:
                    b[dom] = float(v["b"])
            else:
                e_max[dom] = float(v)
        return cls(e_max, b)


@dataclass
class ScoreResult:
    per_domain: dict[str, float]
    total: float


def decathlon_score(errors: dict[str, float], config: ScoreConfig) -> ScoreResult:
    per = {}
    for d, err in errors.items():
        if d not in config.e_max:
            raise ConfigError(f"no baseline error configured for domain {d!r}")
        if not 0.0 <= err <= 1.0:
            raise DataError(f"error for {d!r} must lie in [0, 1], got {err}")
        gap = max(0.0, config.e_max[d] - err)
        per[d] = config.weight(d) * gap ** config.b(d)
    return ScoreResult(per, float(sum(per.values())))


# budgets ----------------------------------------------------------------------------------


def site_params(kind: str, M: int, N: int, K: int = 3, rank: int | None = None) -> int:
    """Closed-form trainable-parameter count of one adaptation site."""
    if kind in ("mad", "pa", "central", "additive"):
        return M * N
    if kind in ("mad-fact", "pa-fact"):
        return rank * (M + N)
    if kind in ("ra", "dan"):
        return M * M
    if kind == "ba2":
        return M
    if kind == "mask":
        return 0
    raise ConfigError(f"no closed form for kind {kind!r}")


def adapter_bits(adapter) -> int:
    return adapter.mask_bits if isinstance(adapter, MaskAdapter) else 0


@dataclass
class DomainBudget:
    domain_id: str
    kind: str
    adapters: int
    bn: int
    head: int
    mask_bits: int = 0
    per_site: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.adapters + self.bn + self.head


@dataclass
class BudgetReport:
    backbone_params: int
    domains: dict[str, DomainBudget]
    include_bn: bool = False
    include_heads: bool = False

    def _extra(self, bn: bool, heads: bool) -> int:
        return sum(d.adapters + (d.bn if bn else 0) + (d.head if heads else 0) for d in self.domains.values())

    @property
    def relative_total(self) -> float:
        """(backbone + counted per-domain params) / backbone, per the report options."""
        return (self.backbone_params + self._extra(self.include_bn, self.include_heads)) / self.backbone_params

    @property
    def relative_excluding_bn(self) -> float:
        return (self.backbone_params + self._extra(False, self.include_heads)) / self.backbone_params

    @property
    def relative_including_bn(self) -> float:
        return (self.backbone_params + self._extra(True, self.include_heads)) / self.backbone_params

    def rows(self) -> list[dict]:
        out = []
        for d in self.domains.values():
            out.append({
                "domain": d.domain_id, "kind": d.kind, "adapters": d.adapters, "bn": d.bn, "head": d.head,
                "mask_bits": d.mask_bits,
                "relative": (d.adapters + (d.bn if self.include_bn else 0)
                             + (d.head if self.include_heads else 0)) / self.backbone_params,
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["domain", "kind", "adapters", "bn", "head", "mask_bits", "relative"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow(r)
        w.writerow({"domain": "TOTAL", "kind": "", "adapters": sum(d.adapters for d in self.domains.values()),
                    "bn": sum(d.bn for d in self.domains.values()),
                    "head": sum(d.head for d in self.domains.values()),
                    "mask_bits": sum(d.mask_bits for d in self.domains.values()),
                    "relative": self.relative_total})
        buf.write(f"# backbone_params={self.backbone_params} relative_excl_bn={self.relative_excluding_bn:.6f} "
                  f"relative_incl_bn={self.relative_including_bn:.6f}\n")
        return buf.getvalue()


def domain_budget(model, domain_id) -> DomainBudget:
    dm = model.domain(domain_id)
    per_site = {name: a.num_params for name, a in dm.adapters.items()}
    adapters = sum(per_site.values())
    if dm.own_weights is not None:
        adapters += sum(fb.weights.size for fb in dm.own_weights.values())
    bn = sum(p.scale.size + p.shift.size for p in dm.bn.values()) if dm.bn_trainable else 0
    head = dm.head_weight.size + dm.head_bias.size
    bits = sum(adapter_bits(a) for a in dm.adapters.values())
    return DomainBudget(dm.domain_id, dm.kind, adapters, bn, head, bits, per_site)


def budget(model, include_bn: bool = False, include_heads: bool = False, domains=None) -> BudgetReport:
    ids = list(model.domains) if domains is None else [str(d) for d in domains]
    return BudgetReport(
        model.backbone_param_count(), {d: domain_budget(model, d) for d in ids}, include_bn, include_heads
    )


def hybrid_balance(adapter: HybridAdapter) -> int:
    """|params(mad) - params(pa)| for one hybrid site."""
    return abs(adapter.mad.num_params - adapter.pa.num_params)


def site_rank(adapter) -> int | None:
    if isinstance(adapter, (FactorizedModulationAdapter,)) or (
        isinstance(adapter, ParallelAdapter) and adapter.factorized
    ):
        return adapter.intermediate_dim
    return None


# mask storage ------------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskStorage:
    bits: int
    mask_bytes: int
    scalar_bytes: int = MASK_SCALAR_BYTES

    @property
    def total_bytes(self) -> int:
        return self.mask_bytes + self.scalar_bytes


def mask_storage(adapter: MaskAdapter) -> MaskStorage:
    """One bit per base weight, packed into bytes, plus the affine value pair."""
    bits = adapter.mask_bits
    return MaskStorage(bits, math.ceil(bits / 8))


def model_mask_storage(model, domain_id) -> MaskStorage:
    dm = model.domain(domain_id)
    sites = [mask_storage(a) for a in dm.adapters.values() if isinstance(a, MaskAdapter)]
    return MaskStorage(
        sum(s.bits for s in sites), sum(s.mask_bytes for s in sites), sum(s.scalar_bytes for s in sites)
    )


# ranks ------------------------------------------------------------------------------------


def average_rank(table: dict[str, dict[str, float]]) -> dict[str, float]:
    """Mean per-domain rank of each method (1 = most accurate; ties share the mean rank)."""
    methods = list(table)
    if not methods:
        return {}
    domains = list(table[methods[0]])
    for m in methods:
        if set(table[m]) != set(domains):
            raise DataError(f"method {m!r} does not cover the same domains")
    acc = np.array([[table[m][d] for d in domains] for m in methods], np.float64)
    ranks = np.empty_like(acc)
    for j in range(acc.shape[1]):
        col = acc[:, j]
        greater = (col[None, :] > col[:, None]).sum(axis=1)
        equal = (col[None, :] == col[:, None]).sum(axis=1)
        ranks[:, j] = 1 + greater + (equal - 1) / 2.0
    return {m: float(ranks[i].mean()) for i, m in enumerate(methods)}


# results files -------------------------------------------------------------------------------


RESULT_FIELDS = ("method", "domain", "accuracy", "error", "params_abs", "params_rel")


def append_result(path, record: dict) -> None:
    missing = [k for k in RESULT_FIELDS if k not in record]
    if missing:
        raise DataError(f"result record lacks {missing}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_results(path) -> list[dict]:
    """Accepts JSON lines, a JSON list, or a single JSON object."""
    text = Path(path).read_text()
    stripped = text.strip()
    if not stripped:
        return []
    try:
        data = json.loads(stripped)
        records = data if isinstance(data, list) else [data]
    except ValueError:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    for r in records:
        if "domain" not in r or ("error" not in r and "accuracy" not in r):
            raise DataError(f"result record lacks domain/error: {r}")
        r.setdefault("error", 1.0 - r.get("accuracy", 0.0))
    return records


def score_rows(records: list[dict], config: ScoreConfig | None = None) -> list[dict]:
    """One row per (method, domain) plus a per-method total; baselines from finetune records if absent."""
    if config is None:
        ft = [r for r in records if r.get("method") == "finetune"]
        if not ft:
            raise ConfigError("no score config given and no finetune results to derive baseline errors")
        config = ScoreConfig.from_finetune_errors(_mean_by_domain(ft, "error"))
    rows = []
    for method in dict.fromkeys(r.get("method", "") for r in records):
        errs = _mean_by_domain([r for r in records if r.get("method", "") == method], "error")
        res = decathlon_score(errs, config)
        for d, s in res.per_domain.items():
            rows.append({"method": method, "domain": d, "error": errs[d], "score": s})
        rows.append({"method": method, "domain": "TOTAL", "error": "", "score": res.total})
    return rows


def _mean_by_domain(records, key) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in records:
        acc.setdefault(str(r["domain"]), []).append(float(r[key]))
    return {d: float(np.mean(v)) for d, v in acc.items()}


def accuracy_table(records: list[dict]) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, list[float]]] = {}
    for r in records:
        table.setdefault(r.get("method", ""), {}).setdefault(str(r["domain"]), []).append(
            float(r.get("accuracy", 1.0 - r["error"]))
        )
    return {m: {d: float(np.mean(v)) for d, v in row.items()} for m, row in table.items()}


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
