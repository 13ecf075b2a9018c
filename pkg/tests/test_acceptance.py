"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line. Run standalone with
``python3 tests/test_acceptance.py`` for just those lines, or under pytest
(``-s`` keeps the lines in the output; they also land in the summary).
The directional study (criteria 6 and 7) trains 30 runs and takes roughly
half an hour on one core; it is computed once and shared.
"""
from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import pytest

from daalign.checks import (check_degenerate_weights, check_gradients, check_masks, check_reproducibility,
                            check_swd_properties, check_transport_oracle)
from daalign.cli.config import toy_benchmark_config
from daalign.cli.runner import run_ablation

SEEDS = (0, 1, 2, 3, 4)
FULL, SOURCE = "backbone+decoder", "source-only"
STUDY_BUDGET = 3600.0

_study: dict = {}


def report(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()


def _study_result(root: Path):
    if "result" not in _study:
        start = time.perf_counter()
        base = toy_benchmark_config(out_dir=str(root / "ablation"))
        _study["result"] = run_ablation(base, list(SEEDS))
        _study["seconds"] = time.perf_counter() - start
    return _study["result"], _study["seconds"]


@pytest.fixture(scope="module")
def study_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _check(name, result, budget=None):
    ok = result.passed and (budget is None or result.seconds < budget)
    extra = "" if budget is None else f", budget {budget:.0f}s"
    report(name, ok, f"{result.detail} ({result.seconds:.1f}s{extra})")
    assert result.passed, result.detail
    if budget is not None:
        assert result.seconds < budget, f"took {result.seconds:.1f}s"


def test_criterion_1_transport_oracle():
    _check("1 transport oracle", check_transport_oracle(pairs=1000, tol=1e-9), budget=30.0)


def test_criterion_2_gradient_suite():
    _check("2 gradient suite", check_gradients(trials=100, tol=1e-4), budget=120.0)


def test_criterion_3_swd_properties():
    _check("3 SWD properties", check_swd_properties(trials=10_000))


def test_criterion_4_mask_oracle():
    _check("4 mask oracle", check_masks(geometries=1000, loss_trials=100))


def test_criterion_5_degenerate_weights():
    _check("5 degenerate weights", check_degenerate_weights(steps=100))


def test_criterion_6_directional_adaptation(study_root):
    res, seconds = _study_result(study_root)
    orders = res.orderings()
    gain = res.mean(FULL) - res.mean(SOURCE)
    failed = [k for k, ok in orders.items() if not ok]
    ok = not failed and gain >= 0.05 and seconds < STUDY_BUDGET
    means = ", ".join(f"{v} {100 * res.mean(v):.1f}" for v in res.variants)
    report("6 directional adaptation", ok,
           f"mAP50 means {means}; gain {100 * gain:+.1f} points; {seconds / 60:.1f} min"
           + (f"; failing: {'; '.join(failed)}" if failed else ""))
    sys.__stdout__.write(res.to_text())
    assert not failed, failed
    assert gain >= 0.05, gain
    assert seconds < STUDY_BUDGET, seconds


def test_criterion_7_high_accuracy_retention(study_root):
    res, _ = _study_result(study_root)
    rows = {t: (res.mean_ratio(FULL, t), res.mean_ratio(SOURCE, t)) for t in (0.8, 0.9)}
    ok = all(a >= b for a, b in rows.values())
    report("7 high-accuracy retention", ok,
           "; ".join(f"mAP{int(100 * t)}/50 adapted {a:.4f} vs source-only {b:.4f}" for t, (a, b) in rows.items()))
    for t, (a, b) in rows.items():
        assert a >= b, (t, a, b)


def test_criterion_8_reproducibility():
    _check("8 reproducibility", check_reproducibility(steps=30))


if __name__ == "__main__":
    failures = 0
    tests = [test_criterion_1_transport_oracle, test_criterion_2_gradient_suite, test_criterion_3_swd_properties,
             test_criterion_4_mask_oracle, test_criterion_5_degenerate_weights, test_criterion_8_reproducibility]
    with tempfile.TemporaryDirectory() as tmp:
        for fn in tests + [lambda: test_criterion_6_directional_adaptation(Path(tmp)),
                           lambda: test_criterion_7_high_accuracy_retention(Path(tmp))]:
            try:
                fn()
            except AssertionError:
                failures += 1
    sys.exit(1 if failures else 0)
