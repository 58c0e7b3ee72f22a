"""Test suite for itoledger."""
