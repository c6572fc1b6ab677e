"""Finite-difference checks for every differentiable op and the full masked-distillation loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .data import ContextWindow
from .encoders import EncoderSpec, PatchEncoder
from .mcm import ContextConfig, MaskPlan, Variant, build_model, variant_forward
from .rng import stream
from .tensor import GradCheckReport, Tensor, grad_check


def _t(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return Tensor(x)


def op_cases(seed: int) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    cases = {}

    def case(name, fn, *inputs):
        # contract with fixed random weights so every output element matters differently
        rng = stream(seed, "gradcheck-weights", name)
        w = Tensor(rng.normal(size=fn(*inputs).shape))
        cases[name] = (lambda *xs: T.tsum(T.mul(fn(*xs), w)), list(inputs))

    r = stream(seed, "gradcheck-inputs")
    case("matmul", T.matmul, _t(r, 3, 4), _t(r, 4, 2))
    case("matmul_batched", T.matmul, _t(r, 2, 3, 4), _t(r, 2, 4, 3))
    case("add", T.add, _t(r, 3, 4), _t(r, 4))
    case("sub", T.sub, _t(r, 3, 4), _t(r, 3, 4))
    case("mul", T.mul, _t(r, 3, 4), _t(r, 3, 4))
    case("scale", lambda a: T.scale(a, 0.7), _t(r, 5))
    case("neg", T.neg, _t(r, 5))
    case("sum_axis", lambda a: T.tsum(a, axis=0), _t(r, 3, 4))
    case("mean", lambda a: T.reshape(T.mean(a, axis=1), (-1,)), _t(r, 3, 4))
    case("abs", T.tabs, _t(r, 6, lo=0.1))
    case("reshape", lambda a: T.reshape(a, (4, 3)), _t(r, 3, 4))
    case("transpose", lambda a: T.transpose(a, (1, 0, 2)), _t(r, 2, 3, 4))
    case("concat", lambda a, b: T.concat([a, b], axis=0), _t(r, 2, 3), _t(r, 1, 3))
    case("index", lambda a: a[np.array([2, 0, 2])], _t(r, 4, 3))
    case("softmax", T.softmax, _t(r, 3, 5))
    case("log_softmax", T.log_softmax, _t(r, 3, 5))
    case("gelu", T.gelu, _t(r, 4, 4))
    case("tanh", T.tanh, _t(r, 4, 4))
    case("sigmoid", T.sigmoid, _t(r, 4, 4))
    case("layer_norm", T.layer_norm, _t(r, 3, 6), _t(r, 6), _t(r, 6))
    rows = np.array([True, False, True, False])
    case("replace_rows", lambda x, tok: T.replace_rows(x, rows, tok), _t(r, 4, 3), _t(r, 3))
    case("conv2d", T.conv2d, _t(r, 2, 2, 5, 5), _t(r, 3, 2, 3, 3), _t(r, 3))
    case("conv2d_stride2", lambda x, w, b: T.conv2d(x, w, b, 2), _t(r, 1, 2, 5, 5), _t(r, 2, 2, 3, 3), _t(r, 2))
    case("mean_pool2d", T.mean_pool2d, _t(r, 2, 3, 5, 4))
    labels = np.array([1, 0, 2])
    cases["cross_entropy"] = (lambda z: T.cross_entropy(z, labels), [_t(r, 3, 4)])
    return cases


TINY_SPEC = EncoderSpec(channels=(2,), kernels=(3,), out_dim=8, patch=4)
TINY_TEACHER = EncoderSpec(channels=(2,), kernels=(3,), out_dim=12, patch=4)
TINY_CONTEXT = ContextConfig(layers=1, heads=2, mlp_hidden=8, predictor_hidden=8)


def full_graph_case(seed: int, variant: Variant = Variant.MCM_KD):
    """Whole loss on a 2x2 context window of 4px patches, all trainable tensors as inputs."""
    rng = stream(seed, "gradcheck-model")
    student = PatchEncoder(TINY_SPEC, stream(seed, "gradcheck-student"))
    teacher = PatchEncoder(TINY_TEACHER, stream(seed, "gradcheck-teacher"))
    model = build_model(variant, student, teacher, 2, TINY_CONTEXT, seed)
    # larger weights than the 0.02 init so the check exercises non-trivial curvature
    for p in model.parameters():
        p.data = rng.normal(0.0, 0.5, size=p.shape)
    window = ContextWindow(rng.random((4, 4, 4, 3)), (0, 0), 1.0)
    plan = MaskPlan(4, np.array([1, 2]), 0.5)
    params = model.parameters()

    def loss(*_):
        return variant_forward(model, window, plan)

    return loss, params


def run_all(seed: int = 0, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    out = {}
    for name, (fn, inputs) in op_cases(seed).items():
        out[name] = grad_check(fn, inputs, tol=tol)
    fn, params = full_graph_case(seed)
    out["mcm-kd full loss"] = grad_check(fn, params, tol=tol)
    return out
