"""Tests for the simulation, split files and the delimited loader."""

import numpy as np
import pytest

from src.ectr.data import (
    Batch,
    Dataset,
    generate_simulation,
    load_delimited,
    split_metrics_oracle,
    standardize,
    write_split_files,
)
from src.ectr.errors import ConfigError, ParseError, SchemaError, ShapeError
from src.ectr.models import SimulationSpec

SCHEMA = {"a": "feature", "b": "feature", "label": "label", "env": "env_id"}


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestBatch:
    """Test batch containers."""

    def test_label_count_must_match(self):
        """Test labels and rows must agree."""
        with pytest.raises(ShapeError):
            Batch(x=np.zeros((3, 2)), y=np.zeros(2))

    def test_inference_inputs_prefer_aux(self):
        """Test aux variables feed inference when present."""
        batch = Batch(x=np.zeros((2, 3)), y=np.zeros(2), aux=np.ones((2, 1)))

        np.testing.assert_array_equal(batch.inference_inputs, np.ones((2, 1)))

    def test_inference_inputs_fall_back_to_features(self):
        """Test features feed inference without aux."""
        batch = Batch(x=np.arange(4.0).reshape(2, 2), y=np.zeros(2))

        assert batch.inference_inputs is batch.x

    def test_take(self):
        """Test row selection carries every field."""
        batch = Batch(x=np.arange(6.0).reshape(3, 2), y=np.array([0.0, 1.0, 0.0]), env=np.array([0, 1, 1]),
                      index=np.array([10, 11, 12]))
        sub = batch.take(np.array([2, 0]))

        np.testing.assert_array_equal(sub.index, [12, 10])
        np.testing.assert_array_equal(sub.env, [1, 0])
        assert sub.aux is None


class TestSimulation:
    """Test the temporal mixed-shift generator."""

    def test_layout(self, small_dataset):
        """Test two train environments and one test environment per p_s entry."""
        assert small_dataset.n_train_envs == 2
        assert len(small_dataset.test) == 2
        assert small_dataset.feature_names == ["x_inv", "x_sp"]
        assert small_dataset.aux_names == ["t"]
        assert all(len(b) == 200 for b in (*small_dataset.train, *small_dataset.test))

    def test_time_segments(self, small_dataset):
        """Test train environments split t at 0.5."""
        first, second = small_dataset.train

        assert first.aux.max() < 0.5
        assert second.aux.min() >= 0.5

    def test_same_seed_same_data(self, small_spec):
        """Test regeneration is deterministic."""
        a = generate_simulation(small_spec)
        b = generate_simulation(small_spec)

        for ba, bb in zip((*a.train, *a.test), (*b.train, *b.test)):
            np.testing.assert_array_equal(ba.x, bb.x)
            np.testing.assert_array_equal(ba.y, bb.y)

    def test_different_seed_differs(self, small_spec):
        """Test the seed changes the draw."""
        a = generate_simulation(small_spec)
        b = generate_simulation(small_spec.model_copy(update={"seed": 4}))

        assert not np.array_equal(a.train[0].x, b.train[0].x)

    def test_noiseless_invariant_rule_is_perfect(self):
        """Test p_v = 1 without noise makes x_inv a perfect rule everywhere."""
        dataset = generate_simulation(SimulationSpec(n_per_env=300, p_v=1.0, noise_std=0.0, seed=1))

        assert all(r.invariant == 1.0 for r in split_metrics_oracle(dataset))

    def test_reference_rules_track_probabilities(self):
        """Test the reference rules land on p_v and p_s per environment."""
        spec = SimulationSpec(n_per_env=20000, noise_std=0.0, seed=2)
        rows = split_metrics_oracle(generate_simulation(spec))
        by_key = {(r.split, r.env): r for r in rows}

        for r in rows:
            assert r.invariant == pytest.approx(0.8, abs=0.01)
        assert by_key[("train", 0)].spurious == pytest.approx(0.999, abs=0.01)
        assert by_key[("train", 1)].spurious == pytest.approx(0.9, abs=0.01)
        for k, p_s in enumerate(spec.p_s_test):
            assert by_key[("test", k)].spurious == pytest.approx(p_s, abs=0.01)

    def test_labels_balanced(self):
        """Test labels are balanced within 5% per environment."""
        dataset = generate_simulation(SimulationSpec(n_per_env=5000, seed=6))

        for b in (*dataset.train, *dataset.test):
            assert abs(b.y.mean() - 0.5) <= 0.05

    def test_pooled_train(self, small_dataset):
        """Test pooling assigns env ids and a global index."""
        pool = small_dataset.pooled_train()

        assert len(pool) == 400
        np.testing.assert_array_equal(np.bincount(pool.env), [200, 200])
        np.testing.assert_array_equal(pool.index, np.arange(400))
        assert pool.aux.shape == (400, 1)

    def test_provenance_note(self, small_dataset):
        """Test the generative instantiation is recorded."""
        assert any("simulation" in note for note in small_dataset.provenance)


class TestSplitFiles:
    """Test writing and re-reading per-environment files."""

    def test_file_set(self, tmp_path):
        """Test the default config writes 2 train and 5 test files."""
        dataset = generate_simulation(SimulationSpec(n_per_env=20, seed=0))
        files = write_split_files(dataset, tmp_path)

        assert sorted(p.name for p in files) == sorted(
            [f"train_env{k}.csv" for k in range(2)] + [f"test_env{k}.csv" for k in range(5)]
        )
        assert files[0].read_text().splitlines()[0] == "x_inv,x_sp,y,env_id,t"

    def test_byte_identical_rewrites(self, tmp_path, small_spec):
        """Test the same seed writes identical bytes."""
        first = write_split_files(generate_simulation(small_spec), tmp_path / "a")
        second = write_split_files(generate_simulation(small_spec), tmp_path / "b")

        for p, q in zip(first, second):
            assert p.read_bytes() == q.read_bytes()

    def test_round_trip_through_loader(self, tmp_path, small_dataset):
        """Test unstandardized loading recovers the generated values exactly."""
        write_split_files(small_dataset, tmp_path)
        schema = {"x_inv": "feature", "x_sp": "feature", "y": "label", "env_id": "env_id", "t": "aux"}
        loaded = load_delimited(tmp_path, schema, standardize_features=False)

        assert loaded.n_train_envs == 2
        np.testing.assert_array_equal(loaded.train[1].x, small_dataset.train[1].x)
        np.testing.assert_array_equal(loaded.test[0].y, small_dataset.test[0].y)
        np.testing.assert_array_equal(loaded.train[0].aux, small_dataset.train[0].aux)


class TestLoadDelimited:
    """Test the generic loader."""

    def test_exact_values(self, tmp_path):
        """Test a three-row file parses to the expected matrix."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1.5,-2,1,0", "0,3e-1,0,0", "4,.5,1,1"])
        dataset = load_delimited(path, SCHEMA, test_envs=[1], standardize_features=False)

        np.testing.assert_array_equal(dataset.train[0].x, [[1.5, -2.0], [0.0, 0.3]])
        np.testing.assert_array_equal(dataset.train[0].y, [1.0, 0.0])
        np.testing.assert_array_equal(dataset.test[0].x, [[4.0, 0.5]])

    def test_tab_delimiter(self, tmp_path):
        """Test tab-separated files."""
        path = _write(tmp_path / "d.tsv", ["a\tb\tlabel\tenv", "1\t2\t0\t0", "3\t4\t1\t1"])
        dataset = load_delimited(path, SCHEMA, delimiter="\t", standardize_features=False)

        assert dataset.n_train_envs == 2

    def test_constant_column_standardizes_to_zero(self, tmp_path):
        """Test a constant column becomes all zeros."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "7,1,0,0", "7,2,1,0", "7,3,0,1"])
        dataset = load_delimited(path, SCHEMA, test_envs=[1])

        np.testing.assert_array_equal(dataset.train[0].x[:, 0], [0.0, 0.0])
        np.testing.assert_array_equal(dataset.test[0].x[:, 0], [0.0])

    def test_standardize_uses_train_statistics(self, tmp_path):
        """Test train features end up with mean 0 and std 1."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "3,6,1,0", "5,1,0,1"])
        dataset = load_delimited(path, SCHEMA, test_envs=[1])

        np.testing.assert_allclose(dataset.train[0].x.mean(axis=0), [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(dataset.train[0].x.std(axis=0), [1.0, 1.0])
        np.testing.assert_allclose(dataset.test[0].x[0, 0], 3.0)

    def test_malformed_cell(self, tmp_path):
        """Test a malformed number names its row and column."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "1,x2,0,0"])
        with pytest.raises(ParseError) as exc_info:
            load_delimited(path, SCHEMA)

        assert exc_info.value.row == 3
        assert exc_info.value.column == "b"

    def test_quoted_cell_rejected(self, tmp_path):
        """Test quoted fields are refused."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", '"1",2,0,0'])
        with pytest.raises(ParseError, match="quoted"):
            load_delimited(path, SCHEMA)

    def test_ragged_row(self, tmp_path):
        """Test a short row is a parse error."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0"])
        with pytest.raises(ParseError):
            load_delimited(path, SCHEMA)

    def test_long_row(self, tmp_path):
        """Test a row with more cells than the header names its line."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "1,2,0,0,5"])
        with pytest.raises(ParseError) as exc_info:
            load_delimited(path, SCHEMA)

        assert exc_info.value.row == 3

    def test_blank_lines_keep_file_line_numbers(self, tmp_path):
        """Test blank lines are skipped but still counted in error rows."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "", "1,bad,0,0"])
        with pytest.raises(ParseError) as exc_info:
            load_delimited(path, SCHEMA)

        assert exc_info.value.row == 4
        assert exc_info.value.column == "b"

    def test_blank_lines_skipped(self, tmp_path):
        """Test a blank line between rows is not a data row."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "", "3,4,1,0"])
        dataset = load_delimited(path, SCHEMA, standardize_features=False)

        np.testing.assert_array_equal(dataset.train[0].x, [[1.0, 2.0], [3.0, 4.0]])

    def test_non_finite_cell(self, tmp_path):
        """Test inf and nan are not accepted as numbers."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0", "inf,2,0,0"])
        with pytest.raises(ParseError) as exc_info:
            load_delimited(path, SCHEMA)

        assert exc_info.value.row == 3
        assert exc_info.value.column == "a"

    def test_fractional_env_id(self, tmp_path):
        """Test environment ids must be integers."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0.5"])
        with pytest.raises(ParseError, match="integer"):
            load_delimited(path, SCHEMA)

    def test_missing_label(self, tmp_path):
        """Test a schema without a label column is a schema error."""
        path = _write(tmp_path / "d.csv", ["a,b,env", "1,2,0"])
        with pytest.raises(SchemaError):
            load_delimited(path, {"a": "feature", "b": "feature", "env": "env_id"})

    def test_column_without_role(self, tmp_path):
        """Test unexpected header columns are schema errors."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env,extra", "1,2,0,0,9"])
        with pytest.raises(SchemaError, match="extra"):
            load_delimited(path, SCHEMA)

    def test_ignored_column(self, tmp_path):
        """Test ignored columns are skipped."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env,note", "1,2,0,0,x"])
        dataset = load_delimited(path, {**SCHEMA, "note": "ignore"}, standardize_features=False)

        assert dataset.feature_names == ["a", "b"]

    def test_without_env_ids(self, tmp_path):
        """Test a file without env ids loads as one unlabeled environment."""
        path = _write(tmp_path / "d.csv", ["a,b,label", "1,2,0", "3,4,1"])
        dataset = load_delimited(path, {"a": "feature", "b": "feature", "label": "label"})

        assert dataset.has_env_ids is False
        assert dataset.pooled_train().env is None

    def test_missing_path(self, tmp_path):
        """Test a missing path is a configuration error."""
        with pytest.raises(ConfigError):
            load_delimited(tmp_path / "absent.csv", SCHEMA)

    def test_unknown_test_env(self, tmp_path):
        """Test requested test environments must exist."""
        path = _write(tmp_path / "d.csv", ["a,b,label,env", "1,2,0,0"])
        with pytest.raises(ConfigError):
            load_delimited(path, SCHEMA, test_envs=[3])

    def test_standardize_keeps_layout(self):
        """Test standardization leaves labels and splits alone."""
        dataset = Dataset(
            train=[Batch(x=np.array([[1.0], [3.0]]), y=np.array([0.0, 1.0]))],
            test=[Batch(x=np.array([[2.0]]), y=np.array([1.0]))],
            feature_names=["a"],
        )
        scaled = standardize(dataset)

        np.testing.assert_allclose(scaled.train[0].x[:, 0], [-1.0, 1.0])
        np.testing.assert_allclose(scaled.test[0].x[:, 0], [0.0])
        np.testing.assert_array_equal(scaled.test[0].y, [1.0])
