import math

import numpy as np
import pandas as pd
import pytest

from fade_sim.adversary import AttackConfig
from fade_sim.analysis import (
    METRIC_COLUMNS,
    AffineMap,
    MetricsWriter,
    QuadraticHead,
    RoundRecord,
    ball_grid,
    epsilon_lower_bound,
    evaluate,
    export_plot_data,
    feature_perturbation,
    gradient_gap,
    head_curvature,
    head_hessian,
    head_input,
    linf_equivalent,
    loss_decrease_report,
    module_diagnostics,
    theorem1_empirical_check,
)
from fade_sim.data import synthetic
from fade_sim.exceptions import ConfigError, StrongConvexityError, UnsupportedHeadError
from fade_sim.model import FadeModel, Partition, cnn_small, parse_layers

SHAPE = (1, 6, 6)


@pytest.fixture(scope="module")
def model():
    partitions = {"joint": Partition("joint", ()), "2-module": Partition("2-module", (4,))}
    return FadeModel.build(cnn_small(SHAPE, 3), partitions, seed=0)


@pytest.fixture(scope="module")
def dataset():
    return synthetic(3, 30, SHAPE, seed=0)


class TestAccuracy:
    def test_zero_budget_attack_keeps_accuracy(self, model, dataset):
        nat, adv = evaluate(model, dataset, AttackConfig(epsilon=0.0))
        assert adv == nat
        predictions = model.predict(dataset.images)
        assert nat == pytest.approx(float((predictions == dataset.labels).mean()))

    def test_attack_never_raises_accuracy(self, model, dataset):
        nat, adv = evaluate(model, dataset, AttackConfig(epsilon=0.3, alpha=0.05, steps=5, clamp=(0.0, 1.0)),
                            batch_size=7)
        assert 0.0 <= adv <= nat <= 1.0

    def test_empty_dataset(self, model, dataset):
        nat, adv = evaluate(model, dataset.head(0), AttackConfig())
        assert math.isnan(nat) and math.isnan(adv)


class TestFeaturePerturbation:
    def test_zero_budget_gives_zero_displacement(self, model, dataset):
        pert = feature_perturbation(model, dataset, AttackConfig(epsilon=0.0))
        assert pert.norms.shape == (30,)
        assert pert.max == 0.0

    def test_displacement_grows_with_budget(self, model, dataset):
        small = feature_perturbation(model, dataset, AttackConfig(epsilon=0.01, alpha=0.005, steps=3))
        large = feature_perturbation(model, dataset, AttackConfig(epsilon=0.2, alpha=0.05, steps=3))
        assert 0 < small.mean < large.mean
        summary = large.summary()
        assert summary["feat_pert_p50"] <= summary["feat_pert_p95"] <= summary["feat_pert_max"]

    def test_needs_split_model(self, dataset):
        joint = FadeModel.build(cnn_small(SHAPE, 3), {"joint": Partition("joint", ())}, 0)
        with pytest.raises(ConfigError):
            feature_perturbation(joint, dataset, AttackConfig())


class TestCurvature:
    def test_reduced_spectrum_matches_full_hessian(self):
        rng = np.random.default_rng(0)
        for d, k in [(2, 4), (4, 4), (9, 3)]:
            w, b, z = rng.normal(size=(d, k)), rng.normal(size=k), rng.normal(size=d)
            curve = head_curvature(w, b, z, 1)
            full = np.linalg.eigvalsh(head_hessian(w, z, b))
            np.testing.assert_allclose(curve.eigenvalues, full, atol=1e-10)
            assert curve.mu_hat <= curve.beta_hat

    def test_gradient_is_w_times_residual(self):
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        curve = head_curvature(w, None, np.zeros(2), 0)
        np.testing.assert_allclose(curve.gradient, [-0.5, 1.0])
        assert curve.g == pytest.approx(math.sqrt(1.25))

    def test_head_input_shapes(self, model, dataset):
        ref = model.ref("2-module", 1)
        z_out = model.module_net(ref).body.forward(model.params, dataset.images[:4])
        weight, bias, z = head_input(model, ref, z_out)
        assert weight.shape == (144, 3) and bias.shape == (3,)
        assert z.shape == (4, 144)

    def test_head_input_rejects_last_module(self, model):
        with pytest.raises(UnsupportedHeadError):
            head_input(model, model.ref("2-module", 2), np.zeros((1, 64), dtype=np.float32))


class TestBound:
    @pytest.mark.parametrize("g,mu,c,expected", [
        (1.0, 2.0, 1.0, 0.5 + math.sqrt(1.25)),
        (0.0, 1.0, 2.0, 2.0),
        (0.0, 3.0, 0.0, 0.0),
    ])
    def test_hand_values(self, g, mu, c, expected):
        assert epsilon_lower_bound(g, mu, c) == pytest.approx(expected, abs=1e-9)

    def test_rejects_non_strongly_convex(self):
        with pytest.raises(StrongConvexityError):
            epsilon_lower_bound(1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            epsilon_lower_bound(-1.0, 1.0, 1.0)

    def test_linf_equivalent(self):
        assert linf_equivalent(2.0, 4) == pytest.approx(1.0)

    def test_ball_grid_stays_inside(self):
        points = ball_grid(2, 0.1, 0.01)
        norms = np.linalg.norm(points, axis=1)
        assert norms.max() == pytest.approx(0.1)
        assert (norms <= 0.1 + 1e-12).all()
        assert ball_grid(3, 0.0, 0.01).shape == (1, 3)

    def test_linear_module_reaches_operator_norm(self):
        a = np.array([[2.0, 0.0], [0.0, 0.5]])
        head = QuadraticHead(q=np.eye(2), center=np.array([1.0, 1.0]))
        report = theorem1_empirical_check(AffineMap(a, np.zeros(2)), head, np.zeros(2), 0.1)
        assert report.max_displacement == pytest.approx(0.2, abs=1e-6)
        assert report.mu == pytest.approx(1.0)
        assert report.holds

    def test_tanh_module(self):
        rng = np.random.default_rng(3)
        module = AffineMap(rng.normal(size=(2, 2)), np.zeros(2), activation="tanh")
        report = theorem1_empirical_check(module, QuadraticHead(np.diag([1.0, 2.0]), np.zeros(2)),
                                          rng.normal(size=2), 0.05, resolution=1e-3)
        assert report.holds
        assert report.bound >= report.max_displacement


class TestDiagnostics:
    def test_gradient_gap(self, model, dataset):
        x, y = dataset.images[:8], dataset.labels[:8]
        assert gradient_gap(model, model.ref("joint", 1), x, y) == pytest.approx(0.0, abs=1e-6)
        assert gradient_gap(model, model.ref("2-module", 2), x, y) == pytest.approx(0.0, abs=1e-6)
        assert gradient_gap(model, model.ref("2-module", 1), x, y) > 0

    def test_gradient_gap_hand_computed(self):
        spec = parse_layers("linear:1, linear", (1,), 2)
        model = FadeModel.build(spec, {"2-module": Partition("2-module", (1,), aux_head="linear")}, seed=0)
        w1, b1 = 0.5, 0.25
        joint_w, joint_b = np.array([1.0, -2.0]), np.array([0.0, 0.5])
        head_w, head_b = np.array([-1.0, 1.5]), np.array([0.25, 0.0])
        model.params.update({
            "backbone.0.weight": np.array([[w1]], np.float32), "backbone.0.bias": np.array([b1], np.float32),
            "backbone.1.weight": joint_w[None, :].astype(np.float32), "backbone.1.bias": joint_b.astype(np.float32),
            "head.2-module.1.weight": head_w[None, :].astype(np.float32),
            "head.2-module.1.bias": head_b.astype(np.float32),
        })
        x = np.array([[1.0], [-2.0]], dtype=np.float32)
        y = np.array([0, 1])
        h = w1 * x[:, 0].astype(np.float64) + b1

        def d_loss_d_h(weight, bias):
            logits = h[:, None] * weight[None, :] + bias[None, :]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(2), y] -= 1.0
            return (p @ weight) / 2

        diff = d_loss_d_h(joint_w, joint_b) - d_loss_d_h(head_w, head_b)
        expected = math.hypot(float((diff * x[:, 0]).sum()), float(diff.sum()))
        assert expected > 0.1
        assert gradient_gap(model, model.ref("2-module", 1), x, y) == pytest.approx(expected, abs=1e-5)

    def test_module_diagnostics(self, model, dataset):
        x, y = dataset.images[:6], dataset.labels[:6]
        first = module_diagnostics(model, model.ref("2-module", 1), x, y, attack_gain=0.5)
        assert first.g_m > 0 and first.beta_hat > 0
        # d = 144 > K = 3 pads the spectrum with zeros
        assert first.mu_hat == pytest.approx(0.0, abs=1e-12)
        assert math.isnan(first.eps_lb)
        last = module_diagnostics(model, model.ref("2-module", 2), x, y, attack_gain=float("nan"))
        assert math.isnan(last.g_m) and last.grad_gap == pytest.approx(0.0, abs=1e-6)


def _records():
    rows = []
    for t in range(1, 31):
        rows.append(RoundRecord(round=t, phase="warmup", module="2-module/1", loss=3.0 - 0.05 * t))
        loss = 2.0 + 0.01 * t if t % 2 else float("nan")
        rows.append(RoundRecord(round=t, phase="warmup", module="2-module/2", loss=loss))
    return rows


def test_loss_decrease_report():
    report = loss_decrease_report(_records(), start=10, end=30, window=5).set_index("module")
    assert bool(report.loc["2-module/1", "decreased"])
    assert not bool(report.loc["2-module/2", "decreased"])
    assert report.loc["2-module/1", "loss_r30"] == pytest.approx(3.0 - 0.05 * 28)


def test_metrics_writer_and_plot_data(tmp_path):
    path = tmp_path / "run" / "metrics.csv"
    writer = MetricsWriter(str(path))
    assert path.read_text().strip() == ",".join(METRIC_COLUMNS)
    writer.append([RoundRecord(1, "warmup", "joint/1", loss=0.5)])
    writer.append([RoundRecord(2, "warmup", "joint/1", loss=0.25, nat_acc=0.75, adv_acc=0.5)])
    writer.append([])
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[1] == "1,warmup,joint/1,0.5,,,,,,,,,"
    plot = export_plot_data(str(path), str(tmp_path / "plot.csv"))
    assert plot["round"].tolist() == [2]
    assert list(pd.read_csv(tmp_path / "plot.csv").columns) == METRIC_COLUMNS
