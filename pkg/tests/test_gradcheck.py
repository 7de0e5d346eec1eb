import numpy as np

from cfmkit import gradcheck as G
from cfmkit import tensor as T
from cfmkit.tensor import Tensor


def test_every_case_passes_on_a_few_instances():
    results = G.run_checks(instances=2, seed=1)
    assert {r.name for r in results} == set(G.all_cases())
    assert all(r.passed for r in results), G.format_table(results)


def test_required_composites_are_covered():
    names = set(G.all_cases())
    for needed in ("stage-1", "stage-2", "pseudo-Huber", "adversarial generator"):
        assert any(needed in n for n in names), needed


def test_a_wrong_gradient_is_caught():
    # the detached factor hides half of d(x^2)/dx from autodiff
    x = Tensor(np.random.default_rng(0).uniform(0.5, 2.0, size=5), requires_grad=True)
    err = G.check_gradients(lambda: T.sum(T.multiply(x, x.detach())), [x], np.random.default_rng(1))
    assert err > 0.4
    assert not G.CheckResult("broken", 1, err, 0.0).passed


def test_relative_error_floor():
    assert G.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert G.relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8


def test_table_marks_failures():
    table = G.format_table([G.CheckResult("ok", 3, 1e-9, 0.1), G.CheckResult("bad", 3, 0.5, 0.1)])
    lines = table.splitlines()
    assert lines[1].endswith("pass") and lines[2].endswith("FAIL")
