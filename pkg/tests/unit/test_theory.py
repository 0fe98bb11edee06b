import pytest

from fade_sim.theory import FAIL, PASS, SUITES, VIOLATION, run_suites, violation_instance


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_builtin_suites_pass(suite):
    results = run_suites(seed=0, suites=[suite])
    assert results
    failed = [r for r in results if r.status != PASS]
    assert not failed, failed[:3]


def test_instance_counts():
    results = run_suites(seed=0, suites=["curvature", "scaling", "displacement"], instances=100)
    counts = {}
    for r in results:
        counts[r.suite] = counts.get(r.suite, 0) + 1
    assert counts == {"curvature": 100, "scaling": 100, "displacement": 101}


def test_seed_changes_instances_not_verdicts():
    a = run_suites(seed=1, suites=["curvature", "scaling"], instances=20)
    b = run_suites(seed=2, suites=["curvature", "scaling"], instances=20)
    assert [r.instance for r in a] != [r.instance for r in b]
    assert all(r.status == PASS for r in a + b)


def test_injected_violation_is_reported_not_raised():
    result = violation_instance()
    assert result.status == VIOLATION
    assert "strongly convex" in result.detail
    results = run_suites(seed=0, suites=["bound"], inject_violation=True)
    assert results[-1].status == VIOLATION
    assert not any(r.failed for r in results)
    assert FAIL not in {r.status for r in results}
