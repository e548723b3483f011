import json
import time

import numpy as np
import pytest

from trafficlens.bench import BenchReport, emit_report, time_inference, time_training
from trafficlens.errors import BenchError, ConsistencyError
from trafficlens.explain import ExplainQualityReport
from trafficlens.metrics import ConfusionMatrix, PredictionSet, RocResult, compute_report
from trafficlens.optim import TrainHistory


class TestTimeTraining:
    def test_sleeping_closure_measured_within_slack(self):
        elapsed, result = time_training(lambda: time.sleep(0.1) or "done")
        assert 0.1 <= elapsed <= 0.15
        assert result == "done"

    def test_noop_non_negative(self):
        elapsed, _ = time_training(lambda: None)
        assert elapsed >= 0.0

    def test_sequential_measurements_independent(self):
        first, _ = time_training(lambda: time.sleep(0.02))
        second, _ = time_training(lambda: time.sleep(0.05))
        assert second > first


class TestTimeInference:
    def test_injected_known_latency(self):
        images = np.zeros((10, 4, 4, 3), dtype=np.uint8)

        def predict(batch):
            time.sleep(0.001 * len(batch))  # 1 ms per sample
            return np.zeros(len(batch))

        mean, std = time_inference(predict, images, trials=5)
        assert 0.001 <= mean <= 0.0015
        assert std >= 0.0

    def test_deterministic_predictor_low_variation(self):
        images = np.zeros((50, 4, 4, 3), dtype=np.uint8)

        def predict(batch):
            return np.tanh(np.arange(2000).reshape(40, 50) @ np.ones((50, 7))).sum()

        mean, std = time_inference(predict, images, trials=6)
        assert std / mean < 0.5

    def test_minimum_three_trials(self):
        images = np.zeros((3, 4, 4, 3))
        mean, std = time_inference(lambda b: None, images, trials=3)
        assert np.isfinite(std)
        with pytest.raises(BenchError):
            time_inference(lambda b: None, images, trials=2)

    def test_empty_test_set_rejected(self):
        with pytest.raises(BenchError):
            time_inference(lambda b: None, np.zeros((0, 4, 4, 3)), trials=3)


class TestBenchReport:
    def test_invariants(self):
        with pytest.raises(BenchError):
            BenchReport(model="m", train_wall_time_s=-1, inference_mean_s=0,
                        inference_std_s=0, trials=3, sample_count=1)
        with pytest.raises(BenchError):
            BenchReport(model="m", train_wall_time_s=0, inference_mean_s=0,
                        inference_std_s=0, trials=0, sample_count=1)


def fake_model_inputs(rng, names):
    metrics, bench, quality = [], [], []
    histories, confusions, rocs = {}, {}, {}
    for i, name in enumerate(names):
        preds = PredictionSet(
            probs=rng.dirichlet(np.ones(3), size=40),
            true_labels=rng.integers(0, 3, size=40),
            class_names=list("abc"),
        )
        report, cm, roc = compute_report(preds, model=name)
        metrics.append(report)
        confusions[name] = cm
        rocs[name] = roc
        bench.append(BenchReport(model=name, train_wall_time_s=10.0 + i,
                                 inference_mean_s=0.001, inference_std_s=0.0001,
                                 trials=5, sample_count=40))
        quality.append(ExplainQualityReport(
            model=name, spatial_compactness=0.5 + 0.1 * i, background_suppression=0.6,
            class_consistency=0.4, shap_magnitude=0.02, pos_neg_separation=0.3,
        ))
        hist = TrainHistory()
        hist.append(1.0, 0.4, 1.1, 0.35, 0.001)
        hist.append(0.6, 0.7, 0.8, 0.6, 0.001)
        histories[name] = hist
    return metrics, bench, quality, histories, confusions, rocs


class TestEmitReport:
    def test_bundle_contains_all_tables(self, tmp_path, rng):
        inputs = fake_model_inputs(rng, ["alpha", "beta"])
        bundle = emit_report(*inputs[:4], tmp_path, confusions=inputs[4], rocs=inputs[5])
        for table in ("table3_cost.csv", "table4_performance.csv",
                      "table5_reliability.csv", "table8_ranking.csv", "report.json"):
            assert (tmp_path / table).exists(), table
        for name in ("alpha", "beta"):
            assert (tmp_path / f"roc_{name}.csv").exists()
            assert (tmp_path / f"learning_curve_{name}.csv").exists()
            assert (tmp_path / f"confusion_{name}.csv").exists()
        assert len(bundle["ranking"]) == 2
        assert set(bundle["models"]) == {"alpha", "beta"}

    def test_ranking_consistent_with_quality(self, tmp_path, rng):
        inputs = fake_model_inputs(rng, ["alpha", "beta"])
        bundle = emit_report(*inputs[:4], tmp_path, confusions=inputs[4], rocs=inputs[5])
        # beta dominates alpha on compactness, everything else equal
        assert bundle["ranking"][0]["model"] == "beta"
        lines = (tmp_path / "table8_ranking.csv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].split(",")[1] == "beta"

    def test_byte_stable_across_runs(self, tmp_path, rng):
        inputs = fake_model_inputs(rng, ["alpha", "beta"])
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        emit_report(*inputs[:4], out_a, confusions=inputs[4], rocs=inputs[5])
        emit_report(*inputs[:4], out_b, confusions=inputs[4], rocs=inputs[5])
        for path_a in sorted(out_a.iterdir()):
            path_b = out_b / path_a.name
            assert path_a.read_bytes() == path_b.read_bytes(), path_a.name

    def test_json_round_trip_reproduces_bundle(self, tmp_path, rng):
        inputs = fake_model_inputs(rng, ["alpha"])
        bundle = emit_report(*inputs[:4], tmp_path, confusions=inputs[4], rocs=inputs[5])
        reloaded = json.loads((tmp_path / "report.json").read_text())
        assert reloaded == json.loads(json.dumps(bundle))

    def test_mismatched_model_names_rejected(self, tmp_path, rng):
        metrics, bench, quality, histories, confusions, rocs = fake_model_inputs(rng, ["alpha", "beta"])
        histories = {"alpha": histories["alpha"], "gamma": histories["beta"]}
        with pytest.raises(ConsistencyError, match="histories"):
            emit_report(metrics, bench, quality, histories, tmp_path,
                        confusions=confusions, rocs=rocs)
