"""Per-domain optimization: cross-entropy, SGD with momentum, AdamW, step schedule."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ArraySplit, DomainData, philox
from .errors import ConfigError, DataError
from .model import MultiDomainModel
from .tensor import Tensor, make_op, no_grad

DEFAULT_WEIGHT_DECAY = 5e-4


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class (max-subtracted, float64)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DataError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {C})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(B), labels]
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return make_op(np.array(nll.mean()), (logits,), backward, "cross_entropy")


def joint_objective(model: MultiDomainModel, batches: dict) -> Tensor:
    """Sum over domains of each domain's cross-entropy on its own batch."""
    total = None
    for domain_id, (x, y) in batches.items():
        loss = cross_entropy(model.forward(domain_id, x, "train"), y)
        total = loss if total is None else total + loss
    if total is None:
        raise DataError("joint_objective needs at least one domain batch")
    return total


# optimizers -------------------------------------------------------------------------


def sgd_momentum_step(params, grads, state: list, lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + grad + wd*param;  param <- param - lr*v  (in place).

    ``state`` holds one velocity array per parameter and is filled lazily.
    """
    if not state:
        state.extend(np.zeros(p.shape, np.float32) for p in params)
    for p, g, v in zip(params, grads, state):
        if g is None:
            g = np.zeros(p.shape, np.float32)
        d = g if weight_decay == 0 else g + np.float32(weight_decay) * p.data
        v *= np.float32(momentum)
        v += d
        p.data -= np.float32(lr) * v


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Adam with decoupled weight decay applied directly to the parameters."""
    if not state.m:
        state.m = [np.zeros(p.shape, np.float64) for p in params]
        state.v = [np.zeros(p.shape, np.float64) for p in params]
    state.step += 1
    b1, b2 = betas
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape, np.float32)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g, dtype=np.float64)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            upd = upd + lr * weight_decay * p.data
        p.data -= upd.astype(np.float32)


# configuration ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    lr_decay_epochs: list = field(default_factory=lambda: [18, 25])
    lr_decay_factor: float = 0.1
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        decays = [int(e) for e in self.lr_decay_epochs]
        if any(b <= a for a, b in zip(decays, decays[1:])) or any(e >= self.epochs or e < 1 for e in decays):
            raise ConfigError(f"lr_decay_epochs {decays} must be strictly increasing and within [1, epochs)")
        self.lr_decay_epochs = decays
        self.betas = tuple(self.betas)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``; decays apply after each listed epoch."""
        n = sum(1 for e in self.lr_decay_epochs if e < epoch)
        return self.lr * self.lr_decay_factor**n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# loops ------------------------------------------------------------------------------------


def evaluate(model: MultiDomainModel, domain_id, split: ArraySplit, batch_size: int = 128, weights=None):
    """(logits [n, C], accuracy) in eval mode."""
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    out = []
    with no_grad():
        for i in range(0, len(split), batch_size):
            x = Tensor._wrap(split.images[i : i + batch_size])
            out.append(model.forward(domain_id, x, "eval", weights=weights).data)
    logits = np.concatenate(out)
    return logits, float((logits.argmax(axis=1) == split.labels).mean())


def train_domain(model: MultiDomainModel, domain_id, dataset: DomainData, config: TrainConfig,
                 log_path=None, progress=None) -> list[dict]:
    """Optimize only ``domain_id``'s trainable parameters; returns per-epoch records.

    Each record is ``{epoch, lr, train_loss, train_acc, val_acc, wall_ms}``;
    with ``log_path`` the records are also written as JSON lines.
    """
    dm = model.domain(domain_id)
    train = dataset.train
    if len(train) == 0:
        raise DataError(f"domain {domain_id!r}: empty training split")
    if train.labels.max() >= dm.class_count:
        raise DataError(f"domain {domain_id!r}: labels exceed the head's {dm.class_count} classes")
    params = dm.parameters()
    rng = philox(config.seed, 17)
    sgd_state: list = []
    adam_state = AdamState()
    log = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            lr = config.lr_at(epoch)
            n = len(train)
            order = rng.permutation(n) if config.shuffle else np.arange(n)
            loss_sum, correct = 0.0, 0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                x = Tensor._wrap(train.images[idx])
                y = train.labels[idx]
                logits = model.forward(domain_id, x, "train")
                loss = cross_entropy(logits, y)
                for p in params:
                    p.grad = None
                loss.backward()
                grads = [p.grad for p in params]
                if config.optimizer == "sgd":
                    sgd_momentum_step(params, grads, sgd_state, lr, config.momentum, config.weight_decay)
                else:
                    adamw_step(params, grads, adam_state, lr, config.betas, weight_decay=config.weight_decay)
                dm.bump()
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == y).sum())
            val_acc = evaluate(model, domain_id, dataset.val)[1] if len(dataset.val) else None
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / n,
                "train_acc": correct / n,
                "val_acc": val_acc,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            log.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if progress:
                progress(record)
    finally:
        if sink:
            sink.close()
    for p in params:
        p.grad = None
    return log


def deterministic_view(log: list[dict]) -> list[dict]:
    """Training log without wall-clock timing, for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log]


def pretrain(spec, source: DomainData, config: TrainConfig, seed: int = 0, log_path=None):
    """Train backbone, BN and a source head jointly, then freeze the backbone.

    Returns ``(model, log)``; the model holds the trained weights as its
    frozen backbone and a ``source`` domain (head only) reproducing the
    pre-trained network.
    """
    from .tensor import FilterBank

    model = MultiDomainModel.initialize(spec, seed)
    model.register_domain("source", "finetune", {"seed": seed}, source.class_count)
    log = train_domain(model, "source", source, config, log_path)
    dm = model.domains.pop("source")
    model.backbone = {n: FilterBank(Tensor(fb.weights.data), frozen=True) for n, fb in dm.own_weights.items()}
    model.base_bn = {n: p.clone(trainable=False) for n, p in dm.bn.items()}
    src = model.register_domain("source", "feature", {"seed": seed}, source.class_count)
    src.head_weight = Tensor(dm.head_weight.data, True)
    src.head_bias = Tensor(dm.head_bias.data, True)
    return model, log


def save_log(log: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in log))
