import numpy as np

from gctnet import gradcheck as gc
from gctnet import layers as L


class BrokenGct(L.GctLayer):
    """Gamma gradient off by one percent."""

    def backward(self, grad):
        gx = super().backward(grad)
        self.grads["gamma"] = self.grads["gamma"] * 1.01
        return gx


class BrokenReLU(L.ReLU):
    """Passes gradient through at negative inputs too."""

    def backward(self, grad):
        return grad


def _broken_gct(rng):
    layer = BrokenGct(3, dtype=np.float64)
    layer.params["gamma"][:] = rng.normal(0, 1, 3)
    return layer, rng.standard_normal((2, 3, 3, 3)), True


def test_corrupted_gradient_detected():
    res = gc.run_case("broken_gct", _broken_gct, instances=3)
    assert not res.passed and res.worst == "gamma"
    res = gc.run_case("broken_relu", lambda rng: (BrokenReLU(), rng.standard_normal((1, 2, 3, 3)),
                                                  True), instances=3)
    assert not res.passed and res.worst == "input"


def test_suite_covers_every_layer_and_variant():
    cases = gc.default_cases()
    for kind in ("conv", "bn_train", "bn_eval", "relu", "maxpool", "gap", "linear", "se",
                 "residual", "softmax_xent"):
        assert kind in cases
    gct_cases = [k for k in cases if k.startswith("gct[")]
    assert len(gct_cases) == 27
    embed_adapt = {tuple(k[4:-1].split(",")[::2]) for k in gct_cases}
    assert len(embed_adapt) == 9


def test_small_suite_passes():
    for res in gc.run_suite(instances=3):
        assert res.passed, res


def test_relative_error_definition():
    assert gc.relative_error([1.0, 2.0], [1.0, 2.0]) == 0
    assert gc.relative_error([0.0, 2.0], [0.0, 1.0]) == 0.5
    assert gc.relative_error([0.0], [0.0]) == 0


def test_numeric_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = gc.numeric_gradient(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9)
    assert x.tolist() == [1.0, -2.0, 0.5]  # restored


def test_kink_margin_sees_relu_zero():
    relu = L.ReLU()
    relu.forward(np.array([0.5, 1e-6, -2.0]).reshape(1, 1, 1, 3))
    assert gc.kink_margin(relu) == 1e-6
