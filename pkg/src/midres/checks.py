"""Named gradient-check cases: one per differentiable op, one MidResBlock, one full classifier.

Random draws that land within ``MARGIN`` of a ReLU kink or a max-pool tie are
redrawn, because a central difference straddling such a point does not
estimate the derivative. The full classifier has tens of thousands of
pre-activations, so it uses the looser ``NETWORK_MARGIN``, still two orders
above the finite-difference step.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradcheckCase, GradcheckReport, gradcheck, kink_margin
from .model import NetworkConfig, build_midres_classifier, init_parameters, midresblock_forward
from .tensor import Parameter

MARGIN = 1e-3
NETWORK_MARGIN = 1e-4
MAX_DRAWS = 2000


def _param(rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Parameter:
    return Parameter(rng.standard_normal(shape) * scale, name=name)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    # fixed random projection to a scalar so no gradient component is trivially symmetric
    return rng.standard_normal(shape)


def _until_smooth(rng: np.random.Generator, draw: Callable[[np.random.Generator], GradcheckCase],
                  margin: float) -> GradcheckCase:
    case = draw(rng)
    for _ in range(MAX_DRAWS):
        if kink_margin(case.run()) >= margin:
            return case
        case = draw(rng)
    return case  # still too close; the check itself will report it


def conv2d_case(rng):
    x = _param(rng, (2, 3, 6, 5), "input")
    w = _param(rng, (4, 3, 3, 3), "weight", 0.5)
    b = _param(rng, (4,), "bias")
    probe = _probe(rng, (2, 4, 6, 5))
    return GradcheckCase.single(lambda: T.weighted_sum(T.conv2d(x, w, b, padding=1), probe), [x, w, b])


def conv2d_strided_case(rng):
    x = _param(rng, (2, 2, 7, 7), "input")
    w = _param(rng, (3, 2, 3, 3), "weight", 0.5)
    b = _param(rng, (3,), "bias")
    probe = _probe(rng, (2, 3, 4, 4))
    return GradcheckCase.single(lambda: T.weighted_sum(T.conv2d(x, w, b, padding=1, stride=2), probe), [x, w, b])


def maxpool2d_case(rng):
    def draw(rng):
        x = _param(rng, (2, 3, 6, 8), "input")
        probe = _probe(rng, (2, 3, 3, 4))
        return GradcheckCase.single(lambda: T.weighted_sum(T.maxpool2d(x), probe), [x])
    return _until_smooth(rng, draw, MARGIN)


def relu_case(rng):
    z = rng.standard_normal((3, 4, 5))
    x = Parameter(np.sign(z) * (MARGIN + np.abs(z)), name="input")
    probe = _probe(rng, x.shape)
    return GradcheckCase.single(lambda: T.weighted_sum(T.relu(x), probe), [x])


def dense_case(rng):
    x = _param(rng, (3, 4), "input")
    w = _param(rng, (4, 2), "weight")
    b = _param(rng, (2,), "bias")
    probe = _probe(rng, (3, 2))
    return GradcheckCase.single(lambda: T.weighted_sum(T.dense(x, w, b), probe), [x, w, b])


def flatten_case(rng):
    x = _param(rng, (2, 3, 4, 4), "input")
    probe = _probe(rng, (2, 48))
    return GradcheckCase.single(lambda: T.weighted_sum(T.flatten(x), probe), [x])


def softmax_cross_entropy_case(rng):
    logits = _param(rng, (5, 3), "logits")
    labels = rng.integers(0, 3, size=5)
    return GradcheckCase.single(lambda: T.softmax_cross_entropy(logits, labels)[0], [logits])


def residual_add_case(rng):
    a = _param(rng, (2, 3, 4, 4), "a")
    b = _param(rng, (2, 3, 4, 4), "b")
    probe = _probe(rng, (2, 3, 4, 4))
    return GradcheckCase.single(lambda: T.weighted_sum(T.residual_add(a, b), probe), [a, b])


def mse_loss_case(rng):
    x = _param(rng, (4, 3), "input")
    target = rng.standard_normal((4, 3))
    return GradcheckCase.single(lambda: T.mse_loss(x, target), [x])


def midresblock_case(rng):
    def draw(rng):
        params = {
            "conv1.weight": _param(rng, (3, 2, 3, 3), "conv1.weight", np.sqrt(2 / 18)),
            "conv1.bias": _param(rng, (3,), "conv1.bias", 0.1),
            "conv2.weight": _param(rng, (3, 3, 3, 3), "conv2.weight", np.sqrt(2 / 27)),
            "conv2.bias": _param(rng, (3,), "conv2.bias", 0.1),
        }
        x = _param(rng, (2, 2, 8, 8), "input")
        probe = _probe(rng, (2, 3, 4, 4))
        return GradcheckCase.single(lambda: T.weighted_sum(midresblock_forward(params, x), probe),
                                    [x, *params.values()])
    return _until_smooth(rng, draw, MARGIN)


def midres_classifier_case(rng):
    """Desk-scale classifier (1x1x64x64, channel plan 4/8/16/32) under cross-entropy, staged per layer."""
    config = NetworkConfig()

    def draw(rng):
        model = init_parameters(build_midres_classifier(config), int(rng.integers(2**31)))
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.data[...] = rng.normal(0.0, 0.05, p.shape)
        # keep the softmax out of saturation so gradients stay well above roundoff
        model.param("out.weight").data[...] *= 0.1
        x = rng.standard_normal((1, 1, 64, 64))
        y = rng.integers(0, config.num_classes, size=1)
        return GradcheckCase(model.stages(x, lambda z: T.softmax_cross_entropy(z, y)[0]))
    return _until_smooth(rng, draw, NETWORK_MARGIN)


CASES: dict[str, Callable[[np.random.Generator], GradcheckCase]] = {
    "conv2d": conv2d_case,
    "conv2d_strided": conv2d_strided_case,
    "maxpool2d": maxpool2d_case,
    "relu": relu_case,
    "dense": dense_case,
    "flatten": flatten_case,
    "softmax_cross_entropy": softmax_cross_entropy_case,
    "residual_add": residual_add_case,
    "mse_loss": mse_loss_case,
    "midresblock": midresblock_case,
    "midres_classifier": midres_classifier_case,
}


def run_cases(names, seeds, rel_tol: float = 1e-4) -> GradcheckReport:
    report = GradcheckReport(rel_tol)
    for name in names:
        report.rows.extend(gradcheck(CASES[name], seeds, rel_tol, name=name).rows)
    return report
