"""Tests for the built-in verification suites."""

import pytest

from src.ectr.errors import InputError
from src.ectr.verify import (
    check_detach,
    check_env_isolation,
    check_kl_nonnegative,
    check_normalization,
    check_tail_endpoints,
    erm_reduction_gap,
    known_inferred_gap,
    run_checks,
    uniform_tv_gap,
)


class TestQuickChecks:
    """Test the fast property suites pass."""

    def test_normalization(self):
        """Test weights sum to one per environment."""
        result = check_normalization()
        assert result.passed
        assert result.worst_error <= 1e-9

    def test_kl_nonnegative(self):
        """Test the environment KL is never negative."""
        assert check_kl_nonnegative().passed

    def test_env_isolation(self):
        """Test scores in one environment leave the others' weights alone."""
        assert check_env_isolation().passed

    def test_tail_endpoints(self):
        """Test beta extremes give environment means and maxima."""
        assert check_tail_endpoints().passed


class TestReductions:
    """Test the special-case reductions."""

    def test_erm_reduction(self):
        """Test uniform weights and zero lambda reproduce ERM updates."""
        assert erm_reduction_gap() <= 1e-10

    def test_known_inferred(self):
        """Test frozen one-hot inference matches known environments."""
        assert known_inferred_gap() <= 1e-10

    def test_uniform_tv(self):
        """Test uniform weights reproduce the unweighted TV penalty."""
        assert uniform_tv_gap() <= 1e-12


class TestDetach:
    """Test the KL gradient routing check."""

    def test_passes(self):
        """Test the unmodified gradients pass."""
        assert check_detach(1e-4).passed

    def test_sign_flip_is_caught(self):
        """Test a flipped KL sign in the adversary gradient fails."""
        result = check_detach(1e-4, inject=["kl-sign-flip"])

        assert not result.passed
        assert result.worst_error > 1e-4


class TestRunChecks:
    """Test the full suite."""

    def test_unknown_injection(self):
        """Test unknown injections are rejected."""
        with pytest.raises(InputError, match="unknown injection"):
            run_checks(inject=["nan-everywhere"])

    @pytest.mark.slow
    def test_all_pass(self):
        """Test every suite passes at the default tolerance."""
        summary = run_checks(tolerance=1e-4)

        assert [c.name for c in summary.checks] == [
            "gibbs_oracle", "fd_phi", "fd_theta", "fd_psi", "fd_eta", "normalization",
            "kl_nonnegative", "env_isolation", "detach", "reductions", "tail_endpoints",
        ]
        assert summary.passed, [c for c in summary.checks if not c.passed]

    @pytest.mark.slow
    def test_injection_fails_suite(self):
        """Test the injected fault fails the detach check only."""
        summary = run_checks(tolerance=1e-4, inject=["kl-sign-flip"])
        failed = [c.name for c in summary.checks if not c.passed]

        assert failed == ["detach"]
