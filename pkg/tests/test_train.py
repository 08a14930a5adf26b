import json

import numpy as np
import pytest

from madkit.data import SyntheticDomainSpec, domain_from_spec
from madkit.errors import ConfigError, DataError
from madkit.model import BackboneSpec, MultiDomainModel
from madkit.tensor import Tensor, grad_check
from madkit.train import (
    AdamState,
    TrainConfig,
    adamw_step,
    cross_entropy,
    deterministic_view,
    evaluate,
    joint_objective,
    pretrain,
    sgd_momentum_step,
    train_domain,
)

from .oracles import cross_entropy_ref

SMALL = BackboneSpec(stem_width=4, widths=(4, 8), blocks_per_stage=1)


def tiny_domain(name="t", seed=0, classes=3):
    return domain_from_spec(SyntheticDomainSpec(name, seed, class_count=classes, image_size=8,
                                                train_count=24, val_count=6, test_count=9))


class TestCrossEntropy:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        z, y = rng.normal(0, 3, (5, 4)), rng.integers(0, 4, 5)
        assert cross_entropy(Tensor(z), y).item() == pytest.approx(cross_entropy_ref(z.astype(np.float32), y), rel=1e-6)

    def test_stable_for_huge_logits(self):
        z = np.array([[1e4, 0.0], [0.0, 1e4]], np.float32)
        assert cross_entropy(Tensor(z), np.array([0, 0])).item() == pytest.approx(5e3)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        y = np.array([0, 2, 1, 2])
        assert grad_check(lambda: cross_entropy(z, y), [z], step=1e-3).max_rel_error < 1e-3

    def test_bad_labels(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))


class TestOptimizers:
    def test_sgd_momentum_by_hand(self):
        p = Tensor(np.array([1.0, -2.0]), True)
        state = []
        sgd_momentum_step([p], [np.array([0.5, 0.5], np.float32)], state, lr=0.1, momentum=0.9, weight_decay=0.1)
        # v = g + wd*p = [0.6, 0.3]; p -= 0.1*v
        np.testing.assert_allclose(p.data, [0.94, -2.03], rtol=1e-6)
        sgd_momentum_step([p], [np.zeros(2, np.float32)], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(state[0], [0.54, 0.27], rtol=1e-6)
        np.testing.assert_allclose(p.data, [0.94 - 0.054, -2.03 - 0.027], rtol=1e-6)

    def test_adamw_first_step_is_lr_sized(self):
        p = Tensor(np.array([1.0, 1.0]), True)
        adamw_step([p], [np.array([3.0, -0.01], np.float32)], AdamState(), lr=0.01)
        np.testing.assert_allclose(p.data, [0.99, 1.01], rtol=1e-5)

    def test_adamw_decoupled_decay(self):
        p = Tensor(np.array([2.0]), True)
        adamw_step([p], [np.zeros(1, np.float32)], AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0], rtol=1e-6)


class TestConfig:
    def test_step_schedule(self):
        cfg = TrainConfig(lr=1.0, epochs=10, lr_decay_epochs=[3, 6], lr_decay_factor=0.1)
        assert [round(cfg.lr_at(e), 6) for e in range(1, 11)] == [1, 1, 1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01]

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(optimizer="rmsprop"), dict(lr_decay_epochs=[5, 3]),
                                     dict(epochs=3, lr_decay_epochs=[3]), dict(momentum=1.0)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        cfg = TrainConfig(optimizer="adamw", lr=0.01, epochs=4, lr_decay_epochs=[2])
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestTraining:
    def test_loss_decreases_and_backbone_frozen(self, tmp_path):
        model = MultiDomainModel.initialize(SMALL, seed=0)
        model.register_domain("t", "mad", {}, 3)
        data = tiny_domain()
        checksum = model.backbone_checksum()
        log = train_domain(model, "t", data, TrainConfig(epochs=6, lr=0.05, lr_decay_epochs=[], batch_size=8),
                           log_path=tmp_path / "log.jsonl")
        assert log[-1]["train_loss"] < log[0]["train_loss"]
        assert model.backbone_checksum() == checksum
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert [json.loads(s)["epoch"] for s in lines] == list(range(1, 7))
        assert set(log[0]) == {"epoch", "lr", "train_loss", "train_acc", "val_acc", "wall_ms"}

    def test_identical_seed_gives_identical_log(self):
        def run():
            model = MultiDomainModel.initialize(SMALL, seed=0)
            model.register_domain("t", "mad-fact", {"rank": 2, "seed": 4}, 3)
            log = train_domain(model, "t", tiny_domain(), TrainConfig(epochs=3, lr_decay_epochs=[2], batch_size=8,
                                                                       seed=4))
            return deterministic_view(log), evaluate(model, "t", tiny_domain().test)[0]
        (a, la), (b, lb) = run(), run()
        assert json.dumps(a) == json.dumps(b)
        assert la.tobytes() == lb.tobytes()

    def test_other_domain_untouched(self):
        model = MultiDomainModel.initialize(SMALL, seed=0)
        model.register_domain("a", "mad", {}, 3)
        model.register_domain("b", "finetune", {}, 3)
        data = tiny_domain()
        before = evaluate(model, "a", data.test)[0]
        train_domain(model, "b", data, TrainConfig(epochs=2, lr_decay_epochs=[], batch_size=8))
        assert evaluate(model, "a", data.test)[0].tobytes() == before.tobytes()

    def test_label_overflow(self):
        model = MultiDomainModel.initialize(SMALL, seed=0)
        model.register_domain("a", "mad", {}, 2)
        with pytest.raises(DataError):
            train_domain(model, "a", tiny_domain(classes=3), TrainConfig(epochs=1, lr_decay_epochs=[]))

    def test_joint_objective_is_sum(self):
        model = MultiDomainModel.initialize(SMALL, seed=0)
        for d in ("a", "b"):
            model.register_domain(d, "bn-only", {}, 3)
        data = tiny_domain()
        x, y = Tensor(data.train.images[:4]), data.train.labels[:4]
        total = joint_objective(model, {"a": (x, y), "b": (x, y)})
        single = cross_entropy(model.forward("a", x, "train"), y)
        assert total.item() == pytest.approx(2 * single.item(), rel=1e-6)


def test_pretrain_freezes_trained_weights():
    src = tiny_domain("source", classes=3)
    model, log = pretrain(SMALL, src, TrainConfig(epochs=2, lr_decay_epochs=[], batch_size=8), seed=1)
    assert len(log) == 2
    dm = model.domain("source")
    assert dm.kind == "feature" and dm.own_weights is None
    assert all(not fb.weights.requires_grad for fb in model.backbone.values())
    fresh = MultiDomainModel.initialize(SMALL, seed=1)
    assert fresh.backbone_checksum() != model.backbone_checksum()
