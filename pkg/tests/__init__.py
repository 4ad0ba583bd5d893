"""Tests for the TALOS migration simulator."""
