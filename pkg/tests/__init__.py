"""Test suite for ECTR."""
