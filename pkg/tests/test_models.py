import numpy as np
import pytest

from tdntc import models
from tdntc.layers import softmax
from tdntc.models import BuildError, ModelConfig, build_model, count_parameters
from tdntc.tensor import ShapeError

# N=12 folds to 4x3 frames; a 3x2 kernel is the geometry that survives the
# 2x2 pool there (the default 3x3 kernel leaves an odd column extent).
GRID_KERNELS = {12: (3, 2), 48: (3, 3)}


def make_config(variant, n_features, n_classes, **kw):
    kw.setdefault("kernel", GRID_KERNELS.get(n_features, (3, 3)))
    return ModelConfig(variant, n_features, n_classes, **kw)


def enumerate_stage_counts(graph):
    """Independent audit oracle: count every element of every live array."""
    per_stage = []
    for stage in graph.stages:
        per_stage.append(sum(arr.size for arr in stage.params().values()))
    return per_stage, sum(per_stage)


class TestGoldenParameterTables:
    def test_m3_td_48_141_matches_reference_table(self):
        graph = build_model(ModelConfig("m3-td", 48, 141))
        rows, total = count_parameters(graph)
        assert [r.name for r in rows] == [
            "CNN_2D", "MP_2D", "BN", "Reshape", "LSTM", "TD(FFNN_0)",
            "Flatten", "FFNN_1"]
        assert [r.count for r in rows] == [1280, 0, 256, 0, 131584, 16512, 0, 108429]
        assert total == 258061

    def test_m3_van_48_141_matches_reference_table(self):
        graph = build_model(ModelConfig("m3-van", 48, 141))
        rows, total = count_parameters(graph)
        assert [r.name for r in rows] == [
            "CNN_2D", "MP_2D", "BN", "Reshape", "LSTM", "FFNN_0",
            "Flatten", "FFNN_1"]
        assert [r.count for r in rows] == [1280, 0, 256, 0, 131584, 16512, 0, 18189]
        assert total == 167821

    def test_decision_stage_formula_for_cos_width(self):
        graph = build_model(ModelConfig("m3-td", 48, 24))
        rows, total = count_parameters(graph)
        assert rows[-1].count == 768 * 24 + 24 == 18456
        assert [r.count for r in rows[:-1]] == [1280, 0, 256, 0, 131584, 16512, 0]

    def test_td_vanilla_delta_confined_to_decision_stage(self):
        td_rows, td_total = count_parameters(build_model(ModelConfig("m3-td", 48, 141)))
        van_rows, van_total = count_parameters(build_model(ModelConfig("m3-van", 48, 141)))
        assert td_total - van_total == 90240
        deltas = [t.count - v.count for t, v in zip(td_rows, van_rows)]
        assert deltas[:-1] == [0] * (len(deltas) - 1)
        assert deltas[-1] == 90240
        assert td_rows[-1].name == van_rows[-1].name == "FFNN_1"

    def test_count_equals_enumeration_over_grid(self):
        for variant in models.VARIANTS:
            for n_features in (12, 48):
                for n_classes in (2, 24, 141):
                    graph = build_model(make_config(variant, n_features, n_classes))
                    rows, total = count_parameters(graph)
                    stage_sizes, live_total = enumerate_stage_counts(graph)
                    assert [r.count for r in rows] == stage_sizes, (
                        variant, n_features, n_classes)
                    assert total == live_total

    def test_lstm_formula_follows_text_not_table_cell(self):
        # 4[(S+1)U+U^2] at S=U=128 is 131,584; the squared-sum misprint
        # would give 196,608 and break the 258,061 total.
        graph = build_model(ModelConfig("m3-td", 48, 141))
        lstm_row = [r for r in count_parameters(graph)[0] if r.name == "LSTM"][0]
        assert lstm_row.count == 4 * ((128 + 1) * 128 + 128 ** 2) == 131584
        assert lstm_row.count != 196608


class TestBuildGeometry:
    def test_m1_td_stage_names(self):
        rows, _ = count_parameters(build_model(ModelConfig("m1-td", 48, 5)))
        assert [r.name for r in rows] == [
            "CNN_2D", "MP_2D", "BN", "Reshape", "TD(FFNN_0)", "Flatten", "FFNN_1"]

    def test_m1_van_stage_names(self):
        rows, _ = count_parameters(build_model(ModelConfig("m1-van", 48, 5)))
        assert [r.name for r in rows] == [
            "CNN_2D", "MP_2D", "BN", "Flatten", "FFNN_0", "FFNN_1"]

    def test_m2_td_sequence_is_n_scalar_steps(self):
        graph = build_model(ModelConfig("m2-td", 48, 5))
        lstm_stage = graph.stages[0]
        assert lstm_stage.name == "LSTM"
        assert lstm_stage.layer.input_size == 1
        logits = graph.forward_logits(np.random.default_rng(0).uniform(size=(2, 48)))
        assert logits.shape == (2, 5)
        flatten_width = graph.stages[-1].layer.in_size
        assert flatten_width == 48 * 128

    def test_default_kernel_fails_cleanly_on_4x3_frames(self):
        with pytest.raises(BuildError) as err:
            build_model(ModelConfig("m3-td", 12, 3))
        assert "MP_2D" in str(err.value)

    def test_oversized_kernel_names_conv_stage(self):
        with pytest.raises(BuildError) as err:
            build_model(ModelConfig("m1-td", 12, 3, kernel=(5, 5)))
        assert "CNN_2D" in str(err.value)

    def test_factor_pair_override_must_cover_features(self):
        with pytest.raises(BuildError):
            build_model(ModelConfig("m3-td", 48, 3, factor_pair=(7, 7)))

    def test_unknown_variant_rejected(self):
        with pytest.raises(BuildError):
            ModelConfig("m4-td", 48, 3)

    def test_config_round_trips_through_dict(self):
        cfg = make_config("m3-td", 12, 3, units=16, td_units=8, seed=77)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def graph():
    return build_model(ModelConfig("m3-td", 48, 5, units=8, td_units=8, seed=3))


class TestPredict:
    def test_single_sample_and_batch_agree(self, graph):
        rng = np.random.default_rng(2)
        batch = rng.uniform(0, 1, size=(6, 8, 6))
        probs, classes = graph.predict(batch)
        assert probs.shape == (6, 5)
        assert classes.shape == (6,)
        for i in range(6):
            p_one, c_one = graph.predict(batch[i])
            assert (p_one == probs[i]).all()
            assert c_one == classes[i]

    def test_untrained_prediction_is_deterministic(self, graph):
        x = np.random.default_rng(4).uniform(0, 1, size=(8, 6))
        first = graph.predict(x)
        second = graph.predict(x)
        assert (first[0] == second[0]).all()
        assert first[1] == second[1]

    def test_argmax_semantics(self):
        probs = np.array([0.1, 0.7, 0.2])
        assert int(probs.argmax()) == 1

    def test_argmax_invariant_under_positive_rescaling(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            logits = rng.normal(size=7)
            scale = float(rng.uniform(0.1, 100.0))
            assert softmax(logits).argmax() == softmax(scale * logits).argmax()

    def test_probabilities_normalized(self, graph):
        x = np.random.default_rng(6).uniform(0, 1, size=(3, 8, 6))
        probs, _ = graph.predict(x)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-12

    def test_wrong_shape_rejected(self, graph):
        with pytest.raises(ShapeError):
            graph.predict(np.zeros((2, 6, 8)))


class TestHolisticFeatures:
    def test_m3_td_width_is_pooled_steps_times_units(self):
        graph = build_model(ModelConfig("m3-td", 48, 141))
        x = np.random.default_rng(0).uniform(0, 1, size=(8, 6))
        assert graph.extract_holistic_features(x).shape == (6 * 128,)

    def test_m3_van_width_is_units(self):
        graph = build_model(ModelConfig("m3-van", 48, 141))
        x = np.random.default_rng(0).uniform(0, 1, size=(8, 6))
        assert graph.extract_holistic_features(x).shape == (128,)

    def test_identical_inputs_identical_features(self):
        graph = build_model(ModelConfig("m2-td", 12, 3, units=6, td_units=6))
        x = np.random.default_rng(1).uniform(0, 1, size=12)
        a = graph.extract_holistic_features(x)
        b = graph.extract_holistic_features(x)
        assert (a == b).all()

    def test_module_level_wrappers(self):
        graph = build_model(make_config("m1-van", 12, 3, units=4, td_units=4))
        x = np.random.default_rng(2).uniform(0, 1, size=(4, 3))
        feats = models.extract_holistic_features(graph, x)
        assert feats.shape == (4,)
        probs, cls = models.predict(graph, x)
        assert probs.shape == (3,)


class TestSeededInitialization:
    def test_same_seed_same_weights(self):
        a = build_model(ModelConfig("m3-td", 48, 5, seed=11))
        b = build_model(ModelConfig("m3-td", 48, 5, seed=11))
        for name, arr in a.params().items():
            assert arr.tobytes() == b.params()[name].tobytes()

    def test_different_seed_different_weights(self):
        a = build_model(ModelConfig("m3-td", 48, 5, seed=11))
        b = build_model(ModelConfig("m3-td", 48, 5, seed=12))
        assert any((arr != b.params()[name]).any()
                   for name, arr in a.params().items())

    def test_biases_start_at_zero(self):
        graph = build_model(ModelConfig("m3-td", 48, 5, seed=1))
        for name, arr in graph.params().items():
            if name.endswith("/bias") or name.endswith("/biases") or name.endswith("/beta"):
                assert (arr == 0).all(), name
