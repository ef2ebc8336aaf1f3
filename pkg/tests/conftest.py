import numpy as np
import pytest

from abstain.corpus import SynthSpec, assign_splits, synth_corpus


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(dim=32, n_id_clusters=3, n_anchors=60, n_easy_ood=60, n_mid=90, seed=5)


@pytest.fixture(scope="session")
def small_store(small_spec):
    return assign_splits(synth_corpus(small_spec), (0.6, 0.2, 0.2), seed=5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
