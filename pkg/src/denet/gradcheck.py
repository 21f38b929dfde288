"""Central finite-difference verification of analytic gradients.

Every differentiable operation is checked by comparing the tape's gradient
of a scalar probe loss against a two-sided difference quotient, coordinate
by coordinate. The probe is ``sum((op(inputs) - target)^2)`` with a fixed
random target so that no gradient component can hide behind symmetry.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor

FD_STEP = 1e-5
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
_FLOOR = 1e-8
# gradients in a 40-layer net legitimately reach 1e-10 and below, where the
# difference quotient is pure roundoff; below this floor the end-to-end
# comparison degrades to an absolute tolerance of floor * END_TO_END_TOLERANCE
END_TO_END_FLOOR = 1e-6


def fd_gradient(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``x``.

    ``f`` must read ``x`` afresh on each call; entries are perturbed in place
    and restored.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def fd_gradient_at(f: Callable[[], float], x: np.ndarray, coords: Sequence[int],
                   h: float = FD_STEP) -> np.ndarray:
    """Like ``fd_gradient`` but only at the given flat coordinates."""
    flat = x.reshape(-1)
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = _FLOOR) -> float:
    """Max over elements of |analytic - numeric| / max(|numeric|, floor).

    The floor turns the ratio into an absolute tolerance once the reference
    gradient sits below it; a central difference with step 1e-5 on a loss of
    order one carries noise around 1e-11, so near-zero gradients cannot be
    certified tighter than that no matter how correct the tape is.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_op_gradients(build: Callable[[], tuple[list[Tensor], Callable[[], Tensor]]],
                       h: float = FD_STEP) -> float:
    """Gradcheck one op construction.

    ``build`` returns (parameters, forward) where ``forward`` re-runs the op
    on the current parameter data and returns a scalar loss tensor. Returns
    the worst relative error over all parameter coordinates.
    """
    params, forward = build()
    loss = forward()
    ad.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = fd_gradient(lambda: forward().item(), p.data, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _probe(out: Tensor, target: np.ndarray) -> Tensor:
    return ad.sum_all(ad.square(ad.sub(out, Tensor(target))))


def _op_cases(rng: np.random.Generator):
    """One gradcheck case per engine op; inputs kept away from ReLU/max kinks."""

    def conv_case(stride, dilation, padding):
        def build():
            spec = ConvSpec(3, 3, stride=stride, dilation=dilation, padding=padding,
                            channels_in=2, channels_out=3)
            x = Tensor(rng.uniform(-1, 1, (2, 7, 7)), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
            oh, ow = spec.out_extents(7, 7)
            target = rng.uniform(-1, 1, (3, oh, ow))
            return [x, w, b], lambda: _probe(ad.conv2d(x, w, b, spec), target)
        return build

    def depthwise_case():
        spec = ConvSpec(3, 3, padding=1, channels_in=3, channels_out=3)
        x = Tensor(rng.uniform(-1, 1, (3, 6, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 3, 3)), requires_grad=True)
        target = rng.uniform(-1, 1, (3, 6, 6))
        return [x, w], lambda: _probe(ad.depthwise_conv2d(x, w, spec), target)

    def separable_case():
        spec = ConvSpec(3, 3, padding=1, channels_in=2, channels_out=4)
        x = Tensor(rng.uniform(-1, 1, (2, 5, 5)), requires_grad=True)
        dw = Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
        pw = Tensor(rng.uniform(-1, 1, (4, 2, 1, 1)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
        target = rng.uniform(-1, 1, (4, 5, 5))
        return [x, dw, pw, b], lambda: _probe(ad.separable_conv2d(x, dw, pw, b, spec), target)

    def transposed_case():
        x = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        target = rng.uniform(-1, 1, (3, 8, 8))
        return [x, w, b], lambda: _probe(ad.transposed_conv2d(x, w, b), target)

    def relu_case():
        # magnitudes >= 0.1 so the finite-difference step cannot cross a kink
        vals = rng.uniform(0.1, 1.0, (2, 5, 5)) * rng.choice([-1.0, 1.0], (2, 5, 5))
        x = Tensor(vals, requires_grad=True)
        target = rng.uniform(-1, 1, (2, 5, 5))
        return [x], lambda: _probe(ad.relu(x), target)

    def max_pool_case():
        x = Tensor(rng.uniform(-1, 1, (2, 6, 6)), requires_grad=True)
        target = rng.uniform(-1, 1, (2, 3, 3))
        return [x], lambda: _probe(ad.max_pool2d(x, 2, 2), target)

    def add_case():
        a = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        target = rng.uniform(-1, 1, (3, 4, 4))
        return [a, b], lambda: _probe(ad.add(a, b), target)

    def sub_case():
        a = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        target = rng.uniform(-1, 1, (3, 4, 4))
        return [a, b], lambda: _probe(ad.sub(a, b), target)

    def mul_case():
        a = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        target = rng.uniform(-1, 1, (3, 4, 4))
        return [a, b], lambda: _probe(ad.mul(a, b), target)

    def scale_case():
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
        target = rng.uniform(-1, 1, (2, 3, 3))
        return [x], lambda: _probe(ad.scale(x, 0.37), target)

    def add_const_case():
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
        target = rng.uniform(-1, 1, (2, 3, 3))
        return [x], lambda: _probe(ad.add_const(x, -1.25), target)

    def square_case():
        x = Tensor(rng.uniform(0.2, 1.0, (2, 3, 3)), requires_grad=True)
        target = rng.uniform(-1, 1, (2, 3, 3))
        return [x], lambda: _probe(ad.square(x), target)

    def sum_all_case():
        x = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
        target = np.asarray(rng.uniform(-1, 1))
        return [x], lambda: _probe(ad.sum_all(x), target)

    return {
        "conv2d": conv_case(1, 1, 0),
        "conv2d_strided": conv_case(2, 1, 1),
        "conv2d_dilated": conv_case(1, 2, 2),
        "depthwise_conv2d": depthwise_case,
        "separable_conv2d": separable_case,
        "transposed_conv2d": transposed_case,
        "relu": relu_case,
        "max_pool2d": max_pool_case,
        "add": add_case,
        "sub": sub_case,
        "mul": mul_case,
        "scale": scale_case,
        "add_const": add_const_case,
        "square": square_case,
        "sum_all": sum_all_case,
    }


def op_gradient_suite(seeds: Sequence[int] = tuple(range(10))) -> dict[str, float]:
    """Worst relative error per op across all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build in _op_cases(rng).items():
            err = check_op_gradients(build)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def end_to_end_gradient_check(seeds: Sequence[int] = tuple(range(10)),
                              coords_per_seed: int = 6) -> float:
    """Finite-difference check of the full network plus combined loss.

    Runs an 8x8 forward, backpropagates the combined loss, then probes a
    random subset of parameter coordinates per seed. Returns the worst
    relative error seen.
    """
    from .losses import CountContext, LossConfig, combined_loss
    from .model import EnetConfig, build_model, forward

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = build_model(EnetConfig(), seed=seed)
        image = Tensor(rng.uniform(0.0, 1.0, (3, 8, 8)))
        gt = Tensor(rng.uniform(0.0, 0.01, (1, 8, 8)))
        ctx = CountContext(n_gt=7, n_detected=3)
        cfg = LossConfig()

        def loss_value() -> Tensor:
            pred = forward(model, image)
            return combined_loss(pred, gt, ctx, cfg)

        loss = loss_value()
        ad.backward(loss)

        names = sorted(model.parameters)
        picks = rng.choice(len(names), size=min(coords_per_seed, len(names)), replace=False)
        for pi in picks:
            p = model.parameters[names[pi]]
            coord = int(rng.integers(p.data.size))
            analytic = p.grad.reshape(-1)[coord]
            numeric = fd_gradient_at(lambda: loss_value().item(), p.data, [coord])[0]
            worst = max(
                worst,
                relative_error(np.asarray([analytic]), np.asarray([numeric]),
                               floor=END_TO_END_FLOOR),
            )
        ad.zero_grad(model.parameters.values())
    return worst
