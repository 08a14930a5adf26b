"""Desk-scale end-to-end experiment on the synthetic benchmark.

One backbone is pre-trained on the source domain; every target domain is
then adapted with the feature-only baseline, full modulation and
factorized modulation at a few ranks, once per seed. All domains live in a
single ``MultiDomainModel`` so the run also exercises isolation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import DomainData, SyntheticDomainSpec, default_benchmark_specs, domain_from_spec
from .metrics import domain_budget
from .model import BackboneSpec, MultiDomainModel
from .train import TrainConfig, evaluate, pretrain, train_domain

TARGETS = ("warm", "striped", "noisy")


def _pretrain_default() -> TrainConfig:
    return TrainConfig(epochs=15, lr=0.1, lr_decay_epochs=[10], batch_size=32)


def _adapt_default() -> TrainConfig:
    return TrainConfig(epochs=14, lr=0.1, lr_decay_epochs=[10], batch_size=32)


@dataclass
class DeskConfig:
    image_size: int = 16
    train_count: int = 320
    val_count: int = 80
    test_count: int = 200
    source_train_count: int = 400
    data_seed: int = 0
    backbone_seed: int = 0
    seeds: tuple = (0, 1, 2)
    ranks: tuple = (4, 8)
    targets: tuple = TARGETS
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    adapt: TrainConfig = field(default_factory=_adapt_default)


@dataclass
class DeskResult:
    model: MultiDomainModel
    data: dict[str, DomainData]
    records: list[dict]
    # test logits captured right after each domain finished training
    logits: dict[str, np.ndarray]
    backbone_checksum: str
    pretrain_seconds: float
    total_seconds: float

    def mean_accuracy(self, target: str, method: str) -> float:
        accs = [r["accuracy"] for r in self.records if r["target"] == target and r["method"] == method]
        return float(np.mean(accs))

    def mean_params(self, target: str, method: str) -> float:
        return float(np.mean([r["params"] for r in self.records if r["target"] == target and r["method"] == method]))

    def domains(self, target: str, method: str) -> list[str]:
        return [r["domain"] for r in self.records if r["target"] == target and r["method"] == method]


def methods(cfg: DeskConfig) -> list[tuple[str, str, dict]]:
    out = [("feature", "feature", {}), ("mad", "mad", {})]
    out += [(f"mad-fact@I{i}", "mad-fact", {"rank": i, "rank_overflow": "full"}) for i in cfg.ranks]
    return out


def desk_specs(cfg: DeskConfig) -> list[SyntheticDomainSpec]:
    specs = default_benchmark_specs(cfg.image_size, cfg.train_count, cfg.val_count, cfg.test_count, cfg.data_seed)
    specs[0].train_count = cfg.source_train_count
    return specs


def run_desk_experiment(cfg: DeskConfig | None = None, progress=None) -> DeskResult:
    cfg = cfg or DeskConfig()
    t0 = time.perf_counter()
    data = {s.name: domain_from_spec(s) for s in desk_specs(cfg)}
    model, _ = pretrain(cfg.backbone, data["source"], cfg.pretrain, seed=cfg.backbone_seed)
    t_pre = time.perf_counter() - t0
    checksum = model.backbone_checksum()
    records, logits = [], {}
    for target in cfg.targets:
        for seed in cfg.seeds:
            for label, kind, extra in methods(cfg):
                domain_id = f"{target}.{label}.s{seed}"
                model.register_domain(domain_id, kind, dict(extra, seed=seed), data[target].class_count)
                t1 = time.perf_counter()
                train_cfg = TrainConfig.from_dict(dict(cfg.adapt.to_dict(), seed=seed))
                train_domain(model, domain_id, data[target], train_cfg)
                logits[domain_id], acc = evaluate(model, domain_id, data[target].test)
                rec = {"target": target, "method": label, "seed": seed, "domain": domain_id, "accuracy": acc,
                       "params": domain_budget(model, domain_id).adapters,
                       "seconds": round(time.perf_counter() - t1, 2)}
                records.append(rec)
                if progress:
                    progress(rec)
    return DeskResult(model, data, records, logits, checksum, t_pre, time.perf_counter() - t0)
