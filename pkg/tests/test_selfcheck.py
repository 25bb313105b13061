"""Oracle battery tests: everything passes on a fresh build, and the
perturbation hook is detectable."""

import io
import time

import numpy as np
import pytest

import insloc.roialign as roialign_mod
from insloc.selfcheck import CHECKS, run_selfcheck


class TestBattery:
    def test_all_checks_pass(self):
        results = run_selfcheck()
        failing = [r.name for r in results if not r.passed]
        assert not failing, failing

    def test_one_line_per_check(self):
        buf = io.StringIO()
        results = run_selfcheck(out=buf)
        lines = buf.getvalue().strip().split("\n")
        assert len(lines) == len(CHECKS) == len(results)
        for line, (name, _, _) in zip(lines, CHECKS):
            assert name in line
            assert line.startswith(("PASS", "FAIL"))

    def test_runtime_under_a_minute(self):
        t0 = time.perf_counter()
        run_selfcheck()
        assert time.perf_counter() - t0 < 60.0

    def test_perturbation_detected_by_named_checks(self, monkeypatch):
        monkeypatch.setattr(roialign_mod, "_FORWARD_WEIGHT_PERTURBATION", 1e-3)
        results = run_selfcheck()
        failed = {r.name for r in results if not r.passed}
        assert "roialign-adjointness" in failed
        assert "roialign-dense-oracle" in failed

    def test_check_results_carry_magnitudes(self):
        results = run_selfcheck()
        for r in results:
            assert np.isfinite(r.max_error)
            assert r.max_error <= r.threshold
