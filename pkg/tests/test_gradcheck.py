import numpy as np
import pytest

from eegmtl import gradcheck
from eegmtl.nn import functional as F
from eegmtl.tensor import Tensor, square, tsum


def test_quadratic_passes():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    rep = gradcheck.grad_check(lambda: tsum(square(x) * 3.0), {"x": x})
    assert rep.passed and rep.max_rel_error < 1e-8


def test_rejects_float32_and_bad_eps():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        gradcheck.grad_check(lambda: tsum(x), {"x": x})
    y = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        gradcheck.grad_check(lambda: tsum(y), {"y": y}, eps=0.1)


def test_layer_suite_passes():
    reports = gradcheck.run_suite(include_model=False)
    assert all(r.passed for r in reports), [line for r in reports for line in r.lines() if "FAIL" in line]


def test_injected_backward_bug_is_caught(monkeypatch):
    monkeypatch.setattr(F, "_relu_backward", lambda x, g: g * (x > 0) * 1.01)
    reports = {r.label: r for r in gradcheck.run_suite(include_model=False)}
    assert not reports["relu"].passed
    assert reports["gelu"].passed


def test_overtight_tolerance_names_parameters():
    reports = gradcheck.run_suite(tol=1e-12, include_model=False)
    failing = [(r.label, p.name) for r in reports for p in r.failures()]
    assert ("linear", "weight") in failing
    assert any(line.startswith("FAIL linear:weight") for r in reports for line in r.lines())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_objective_reported():
    x = Tensor(np.array([1e-6]), requires_grad=True)
    rep = gradcheck.grad_check(lambda: tsum(F.relu(x) * 0.0 + Tensor(np.log(x.data))), {"x": x})
    assert rep.params[0].nonfinite and not rep.passed
