import numpy as np
import pytest

from fade_sim.adversary import AttackConfig
from fade_sim.config import PHASE_ADVERSARIAL, PHASE_WARMUP, TrainConfig
from fade_sim.data import Dataset, ShardAssignment
from fade_sim.engine import (
    RoundPlan,
    SGDMomentum,
    Upload,
    aggregate,
    assign_clients,
    generate_features,
    is_stale,
    local_train,
    plan_round,
)
from fade_sim.exceptions import ConfigError, NumericError, ProtocolError
from fade_sim.model import FadeModel, ModuleRef, Partition, cnn_small, mlp_tiny

PARTITIONS = {"joint": Partition("joint", ()), "2-module": Partition("2-module", (4,)),
              "3-module": Partition("3-module", (2, 4))}


def _shards(n=10, size=10):
    return ShardAssignment(train=[np.arange(k * size, (k + 1) * size) for k in range(n)],
                           validation=[np.zeros(0, dtype=np.int64)] * n, labels_per_client=2, val_ratio=0.0)


def _small_model(seed=0):
    return FadeModel.build(mlp_tiny((1, 4, 4), 3), {"2-module": Partition("2-module", (3,))}, seed)


def _dataset(count=12, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((count, 1, 4, 4), dtype=np.float32), np.arange(count) % 3, 3)


class TestPlanning:
    def test_resource_classes_and_adversarial_ids(self):
        clients = assign_clients(_shards(), [(("joint",), 0.25), (("2-module",), 0.75)], adversarial_fraction=0.2)
        assert [c.resource_class for c in clients[:3]] == [("joint",)] * 3
        assert all(c.resource_class == ("2-module",) for c in clients[3:])
        assert [c.id for c in clients if c.adversarial] == [0, 1]
        assert sum(c.p_k for c in clients) == pytest.approx(1.0)

    def test_plan_is_sorted_distinct_and_seeded(self):
        clients = assign_clients(_shards(), [(("joint", "2-module", "3-module"), 1.0)])
        a = plan_round(0, clients, 4, np.random.default_rng(5), PARTITIONS, lr=0.1)
        b = plan_round(0, clients, 4, np.random.default_rng(5), PARTITIONS, lr=0.1)
        assert a == b
        assert a.clients == sorted(set(a.clients)) and len(a.clients) == 4
        assert set(a.modules) == set(a.clients)
        assert all(ref.scheme in PARTITIONS and 1 <= ref.index <= ref.count for ref in a.modules.values())

    def test_modules_follow_resource_class_and_selection(self):
        clients = assign_clients(_shards(), [(("joint",), 0.3), (("2-module",), 0.7)])
        for seed in range(10):
            plan = plan_round(seed, clients, 10, np.random.default_rng(seed), PARTITIONS,
                              selection={"2-module": (0.0, 1.0)})
            for k, ref in plan.modules.items():
                expected = ModuleRef("joint", 1, 1) if k < 3 else ModuleRef("2-module", 2, 2)
                assert ref == expected

    def test_too_many_clients(self):
        clients = assign_clients(_shards(n=3), [(("joint",), 1.0)])
        with pytest.raises(ConfigError):
            plan_round(0, clients, 4, np.random.default_rng(0), PARTITIONS)


class TestAggregation:
    def _model(self):
        return FadeModel.build(cnn_small((1, 4, 4), 3), PARTITIONS, 0)

    def test_matches_brute_force_weighted_means(self):
        model = self._model()
        refs = model.module_refs()
        rng = np.random.default_rng(11)
        for _ in range(200):
            n_clients = int(rng.integers(1, 6))
            uploads = []
            for k in sorted(rng.choice(20, size=n_clients, replace=False)):
                ref = refs[int(rng.integers(len(refs)))]
                names = model.module_net(ref).param_names()
                params = {name: rng.normal(size=model.params[name].shape).astype(np.float32) for name in names}
                uploads.append(Upload(int(k), ref, params, float(rng.uniform(0.1, 2.0))))
            merged = aggregate(model, uploads)
            for name, before in model.params.items():
                holders = [u for u in uploads if name in u.params]
                if not holders:
                    assert merged.params[name] is before or merged.params[name].tobytes() == before.tobytes()
                    continue
                expected = sum(u.weight * u.params[name].astype(np.float64) for u in holders)
                expected /= sum(u.weight for u in holders)
                np.testing.assert_allclose(merged.params[name], expected, rtol=0, atol=1e-6)

    def test_upload_order_does_not_matter(self):
        model = self._model()
        ref = model.ref("3-module", 2)
        rng = np.random.default_rng(0)
        uploads = [Upload(k, ref, {n: rng.normal(size=model.params[n].shape).astype(np.float32)
                                   for n in model.module_net(ref).param_names()}, 0.1 * (k + 1))
                   for k in range(5)]
        a = aggregate(model, uploads)
        b = aggregate(model, list(reversed(uploads)))
        for name in model.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()
            assert a.params[name].dtype == np.float32

    def test_protocol_errors_name_the_client(self):
        model = self._model()
        ref = model.ref("2-module", 1)
        good = {n: model.params[n].copy() for n in model.module_net(ref).param_names()}
        plan = RoundPlan(0, [3], {3: ref}, lr=0.1, phase=PHASE_WARMUP)
        cases = [
            [Upload(3, ref, good, 1.0), Upload(3, ref, good, 1.0)],
            [Upload(3, model.ref("2-module", 2), {}, 1.0)],
            [Upload(3, ref, dict(good, **{"backbone.99.weight": np.zeros(1, dtype=np.float32)}), 1.0)],
            [Upload(3, ref, dict(good, **{"backbone.0.weight": np.zeros((1, 1), dtype=np.float32)}), 1.0)],
            [Upload(3, ref, good, 0.0)],
        ]
        for uploads in cases:
            with pytest.raises(ProtocolError) as e:
                aggregate(model, uploads, plan)
            assert e.value.client_id == 3
        assert aggregate(model, [Upload(3, ref, good, 1.0)], plan) is not model


def test_sgd_momentum_with_decays():
    params = {"a": np.array([1.0]), "h": np.array([2.0])}
    grads = {"a": np.array([0.5]), "h": np.array([1.0])}
    opt = SGDMomentum(lr=0.1, momentum=0.9, weight_decay=0.01, aux_decay=0.5, head_names=["h"])
    opt.step(params, grads)
    assert params["a"][0] == pytest.approx(0.949)
    assert params["h"][0] == pytest.approx(1.7)
    opt.step(params, grads)
    assert params["a"][0] == pytest.approx(0.852151)
    assert params["h"][0] == pytest.approx(1.34)


class TestLocalTraining:
    def _setup(self, index=1):
        model = _small_model()
        data = _dataset()
        client = assign_clients(ShardAssignment([np.arange(12)], [np.zeros(0, dtype=np.int64)], 2, 0.0),
                                [(("2-module",), 1.0)])[0]
        ref = model.ref("2-module", index)
        return model, ref, generate_features(model, client, ref, data)

    def test_caller_params_untouched_and_deterministic(self):
        model, ref, features = self._setup()
        module = model.module_params(ref)
        before = {k: v.copy() for k, v in module.as_dict().items()}
        cfg = TrainConfig(local_iters=3, batch_size=4, lr=0.1)
        a = local_train(module, features, cfg, None, PHASE_WARMUP, 0.1, np.random.default_rng(1))
        b = local_train(module, features, cfg, None, PHASE_WARMUP, 0.1, np.random.default_rng(1))
        for name, value in module.as_dict().items():
            np.testing.assert_array_equal(value, before[name])
            np.testing.assert_array_equal(a.params.as_dict()[name], b.params.as_dict()[name])
        assert not np.array_equal(a.params.as_dict()["backbone.1.weight"], before["backbone.1.weight"])
        assert a.iterations == 3 and np.isfinite(a.loss)

    def test_attack_only_in_adversarial_phase(self):
        model, ref, features = self._setup()
        module = model.module_params(ref)
        cfg = TrainConfig(local_iters=4, batch_size=4)
        attack = AttackConfig(epsilon=0.1, alpha=0.02, steps=3)
        warm = local_train(module, features, cfg, attack, PHASE_WARMUP, 0.01, np.random.default_rng(0))
        assert warm.stats.calls == 0 and np.isnan(warm.attack_gain)
        adv = local_train(module, features, cfg, attack, PHASE_ADVERSARIAL, 0.01, np.random.default_rng(0))
        assert adv.stats.calls == 4 and adv.stats.steps == 12
        assert np.isfinite(adv.attack_gain)
        clean = local_train(module, features, cfg, None, PHASE_ADVERSARIAL, 0.01, np.random.default_rng(0))
        assert clean.stats.calls == 0

    def test_head_decay_only_with_adversarial_objective(self):
        model, ref, features = self._setup()
        module = model.module_params(ref)
        attack = AttackConfig(epsilon=0.1, alpha=0.02, steps=2)

        def head(phase, attack, aux_weight_decay):
            cfg = TrainConfig(local_iters=3, batch_size=4, momentum=0.0, weight_decay=0.0,
                              aux_weight_decay=aux_weight_decay)
            result = local_train(module, features, cfg, attack, phase, 0.1, np.random.default_rng(0))
            return result.params.as_dict()["head.2-module.1.weight"]

        np.testing.assert_array_equal(head(PHASE_WARMUP, attack, 0.0), head(PHASE_WARMUP, attack, 0.5))
        np.testing.assert_array_equal(head(PHASE_ADVERSARIAL, None, 0.0), head(PHASE_ADVERSARIAL, None, 0.5))
        assert not np.array_equal(head(PHASE_ADVERSARIAL, attack, 0.0), head(PHASE_ADVERSARIAL, attack, 0.5))

    def test_zero_iterations_return_a_copy(self):
        model, ref, features = self._setup(index=2)
        module = model.module_params(ref)
        result = local_train(module, features, TrainConfig(local_iters=0), None, PHASE_WARMUP, 0.1,
                             np.random.default_rng(0))
        assert result.params is not module
        for name, value in module.as_dict().items():
            np.testing.assert_array_equal(result.params.as_dict()[name], value)
        assert np.isnan(result.loss)

    def test_non_finite_loss_reports_sample(self):
        model, ref, features = self._setup(index=2)
        features.z = features.z.copy()
        features.z[5] = np.nan
        with pytest.raises(NumericError) as e:
            local_train(model.module_params(ref), features, TrainConfig(local_iters=1, batch_size=12), None,
                        PHASE_WARMUP, 0.1, np.random.default_rng(0))
        assert e.value.sample == 5


def test_feature_staleness():
    model, data = _small_model(), _dataset()
    client = assign_clients(ShardAssignment([np.arange(12)], [np.zeros(0, dtype=np.int64)], 2, 0.0),
                            [(("2-module",), 1.0)])[0]
    ref = model.ref("2-module", 2)
    features = generate_features(model, client, ref, data)
    assert features.z.shape == (12, 32)
    assert not is_stale(features, model)
    head_changed = model.copy()
    head_changed.params["head.2-module.1.weight"] += 1.0
    assert not is_stale(features, head_changed)
    upstream_changed = model.copy()
    upstream_changed.params["backbone.1.bias"] += 1.0
    assert is_stale(features, upstream_changed)
