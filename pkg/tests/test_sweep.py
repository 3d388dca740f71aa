"""Tests for hyperparameter sweeps."""

from unittest.mock import patch

import pytest

from src.ectr.data import generate_simulation
from src.ectr.errors import ConfigError
from src.ectr.models import RunConfig, SimulationSpec, SweepRow, SweepSpec, TrainConfig
from src.ectr.sweep import aggregate, expand_grid, run_sweep


@pytest.fixture
def sweep_run(small_spec, tiny_config):
    return RunConfig(
        simulation=small_spec,
        train=tiny_config.model_copy(update={"method": "ectr_known", "epochs": 1}),
        sweep=SweepSpec(beta=[0.1, 1.0], seed=[0, 1, 2]),
    )


class TestExpandGrid:
    """Test grid expansion."""

    def test_counts(self, sweep_run):
        """Test 2 betas x 3 seeds give 6 tasks on 2 points."""
        tasks = expand_grid(sweep_run)

        assert len(tasks) == 6
        assert {t.point for t in tasks} == {0, 1}
        assert [t.train_config.beta for t in tasks if t.point == 1] == [1.0, 1.0, 1.0]
        assert sorted(t.train_config.seed for t in tasks if t.point == 0) == [0, 1, 2]

    def test_cartesian_product(self, sweep_run):
        """Test two axes multiply."""
        run = sweep_run.model_copy(update={"sweep": SweepSpec(beta=[0.1, 1.0], lr_phi=[0.01, 0.1, 1.0])})
        tasks = expand_grid(run)

        assert len(tasks) == 6
        assert tasks[0].params == {"beta": 0.1, "lr_phi": 0.01}
        assert all(t.seed == run.train.seed for t in tasks)

    def test_empty_grid(self, sweep_run):
        """Test an empty grid is a config error."""
        with pytest.raises(ConfigError, match="empty"):
            expand_grid(sweep_run.model_copy(update={"sweep": SweepSpec()}))

    def test_seed_only_grid(self, sweep_run):
        """Test a seed list alone is a valid grid."""
        tasks = expand_grid(sweep_run.model_copy(update={"sweep": SweepSpec(seed=[4, 5])}))

        assert [t.seed for t in tasks] == [4, 5]
        assert all(t.params == {} for t in tasks)


class TestAggregate:
    """Test per-point aggregation."""

    def test_mean_and_population_std(self):
        """Test mean and std over seeds."""
        rows = [
            SweepRow(point=0, params={"beta": 1.0}, seed=s, mean=m, worst=w, final_kl_env=0.2, final_p_tv=0.0)
            for s, m, w in ((0, 0.6, 0.5), (1, 0.8, 0.7))
        ]
        (agg,) = aggregate(rows)

        assert agg.n_seeds == 2
        assert agg.mean_mean == pytest.approx(0.7)
        assert agg.mean_std == pytest.approx(0.1)
        assert agg.worst_mean == pytest.approx(0.6)
        assert agg.final_kl_env_mean == pytest.approx(0.2)


class TestRunSweep:
    """Test running a sweep."""

    def test_rows_and_aggregates(self, sweep_run, small_dataset):
        """Test 6 rows and 2 aggregates, sorted by point and seed."""
        rows, aggregates = run_sweep(sweep_run, small_dataset, jobs=2)

        assert len(rows) == 6
        assert len(aggregates) == 2
        assert [(r.point, r.seed) for r in rows] == [(p, s) for p in (0, 1) for s in (0, 1, 2)]
        assert all(a.n_seeds == 3 for a in aggregates)

    def test_parallel_matches_serial(self, sweep_run, small_dataset):
        """Test worker count does not change results."""
        serial, _ = run_sweep(sweep_run, small_dataset, jobs=1)
        parallel, _ = run_sweep(sweep_run, small_dataset, jobs=3)

        assert [r.model_dump() for r in serial] == [r.model_dump() for r in parallel]

    def test_cap_refusal_reports_count(self, sweep_run, small_dataset):
        """Test a grid above the cap is refused with its size."""
        with pytest.raises(ConfigError, match="6 runs"):
            run_sweep(sweep_run, small_dataset, cap=5)

    def test_cap_from_sweep_section(self, sweep_run, small_dataset):
        """Test sweep.max_runs caps the grid."""
        run = sweep_run.model_copy(update={"sweep": sweep_run.sweep.model_copy(update={"max_runs": 4})})
        with pytest.raises(ConfigError, match="cap of 4"):
            run_sweep(run, small_dataset)

    @patch('src.ectr.sweep.config')
    def test_cap_from_environment(self, mock_config, sweep_run, small_dataset):
        """Test the process-level cap applies when nothing else is set."""
        mock_config.sweep_cap = 3
        mock_config.jobs = 1
        with pytest.raises(ConfigError, match="cap of 3"):
            run_sweep(sweep_run, small_dataset)

    @pytest.mark.slow
    def test_kl_decreases_with_beta(self):
        """Test a larger beta leaves the tail weights closer to uniform."""
        run = RunConfig(
            simulation=SimulationSpec(n_per_env=1000, seed=0),
            train=TrainConfig(method="ectr_known", epochs=60, seed=0),
            sweep=SweepSpec(beta=[1e-3, 0.5, 1e3]),
        )
        _, aggregates = run_sweep(run, generate_simulation(run.simulation), jobs=3)
        kls = [a.final_kl_env_mean for a in aggregates]

        assert [a.params["beta"] for a in aggregates] == [1e-3, 0.5, 1e3]
        assert kls[0] > kls[1] > kls[2]
        assert kls[2] < 1e-3
