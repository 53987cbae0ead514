"""Central finite-difference checks of every differentiable op, block and network.

A check contracts the op's output with a fixed random weight map, so the
probed scalar is ``L = sum(R * f(inputs))``; the analytic gradient of ``L``
is compared against ``(L(x + eps) - L(x - eps)) / (2 eps)`` on a random
subset of coordinates of every checked tensor.
"""

from __future__ import annotations

import types
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, backward, precision

EPS = 1e-3
TOLERANCE = 1e-3
# a probe whose step straddles a kink (ReLU corner, max-pool switch) is excluded.
# On a smooth function the central differences at eps and eps/2 agree to O(eps^2)
# and the forward/backward gap halves with the step; a violation of either above
# this fraction of the gradient scale marks a kink. A case fails if more than
# MAX_SKIP_FRACTION of its probes are excluded
KINK_FRACTION = 1e-4
MAX_SKIP_FRACTION = 0.5


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    probes: int
    skipped: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance
                    and self.skipped <= MAX_SKIP_FRACTION * self.probes)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28s} max_rel_err={self.max_rel_error:.3e}  "
                f"probes={self.probes}  kink_skips={self.skipped}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-8:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = EPS,
                    probes: int = 24, seed: int = 0, dtype=np.float64,
                    detect_kinks: bool | None = None) -> dict[str, tuple[float, int, int]]:
    """(relative error, probes used, probes skipped) per named tensor.

    ``fn`` must rebuild its output from the current ``.data`` of ``tensors``
    and be deterministic (recreate any dropout rng inside it). The check runs
    at ``dtype``; the tensors are restored to their original dtype afterwards.
    Kink detection needs float64 resolution and defaults to on only there.
    """
    if detect_kinks is None:
        detect_kinks = np.dtype(dtype) == np.float64
    original = {name: t.data.dtype for name, t in tensors.items()}
    for t in tensors.values():
        t.data = t.data.astype(dtype)
    try:
        with precision(dtype):
            return _compare(fn, tensors, eps, probes, seed, detect_kinks)
    finally:
        for name, t in tensors.items():
            t.data = t.data.astype(original[name])
            t.grad = None


def _compare(fn, tensors, eps, probes, seed, detect_kinks) -> dict[str, tuple[float, int, int]]:
    rng = np.random.default_rng(seed)
    out = fn()
    weights = rng.standard_normal(out.shape)

    def probe_value() -> float:
        return float(np.sum(fn().data.astype(np.float64) * weights))

    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = ops.sum(ops.mul(out, Tensor(weights)))
    backward(loss, list(tensors.values()))

    centre = probe_value()

    def differences(flat, i, h) -> tuple[float, float]:
        """Central difference and forward-minus-backward gap at step ``h``."""
        orig = flat[i]
        flat[i] = orig + h
        up = probe_value()
        flat[i] = orig - h
        down = probe_value()
        flat[i] = orig
        return (up - down) / (2.0 * h), (up + down - 2.0 * centre) / h

    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.astype(np.float64).ravel()
        count = min(probes, t.size)
        idx = rng.choice(t.size, size=count, replace=False)
        numeric, halved = np.empty(count), np.empty(count)
        gap, half_gap = np.empty(count), np.empty(count)
        flat = t.data.reshape(-1)
        for j, i in enumerate(idx):
            numeric[j], gap[j] = differences(flat, i, eps)
            halved[j], half_gap[j] = differences(flat, i, eps / 2.0)
        # smooth: central differences agree and the gap scales linearly with the step
        limit = KINK_FRACTION * np.sqrt(np.mean(analytic[idx] ** 2))
        smooth = (np.abs(numeric - halved) <= limit) & (np.abs(gap - 2.0 * half_gap) <= limit)
        if not detect_kinks:
            smooth[:] = True
        errors[name] = (relative_error(analytic[idx][smooth], numeric[smooth]) if smooth.any() else 0.0,
                        count, int(count - smooth.sum()))
    return errors


def run_case(name: str, fn, tensors, probes: int = 24, eps: float = EPS, dtype=np.float64,
             detect_kinks: bool | None = None) -> GradReport:
    errs = check_gradients(fn, tensors, eps=eps, probes=probes, dtype=dtype, detect_kinks=detect_kinks)
    worst = max((e[0] for e in errs.values()), default=0.0)
    return GradReport(name, worst, sum(e[1] for e in errs.values()), sum(e[2] for e in errs.values()))


# ---------------------------------------------------------------------------
# the suite

def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _module_case(module, make_input, rng, call=None, probes_per_param=6):
    """Gradients w.r.t. the input and every parameter of a module."""
    x = make_input()
    call = call or (lambda m, x: m(x))
    tensors = {"input": x}
    for pname, p in module.named_parameters():
        tensors[pname] = p
    return (lambda: call(module, x)), tensors, probes_per_param


def _cases(scope: dict) -> dict[str, Callable]:
    return {k: v for k, v in scope.items() if isinstance(v, types.FunctionType) and not k.startswith("_")}


def _op_cases(rng: np.random.Generator) -> dict[str, Callable]:
    def conv3d():
        x, w, b = _rand(rng, 1, 2, 3, 5, 5), _rand(rng, 3, 2, 3, 3, 3, scale=0.3), _rand(rng, 3)
        spec = ops.ConvSpec.make(2, 3, 3, stride=(1, 2, 1), padding=1)
        return (lambda: ops.conv3d(x, w, b, spec)), {"input": x, "weight": w, "bias": b}, 24

    def conv2d():
        x, w, b = _rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3, scale=0.3), _rand(rng, 4)
        spec = ops.ConvSpec.make(3, 4, 3, stride=2, padding=1, dims=2)
        return (lambda: ops.conv2d(x, w, b, spec)), {"input": x, "weight": w, "bias": b}, 24

    def pool3d_max():
        x = _rand(rng, 1, 2, 2, 4, 4)
        return (lambda: ops.pool3d(x, "max", (1, 2, 2))), {"input": x}, 24

    def pool3d_avg():
        x = _rand(rng, 1, 2, 3, 4, 4)
        return (lambda: ops.pool3d(x, "avg", (2, 2, 2), (1, 2, 2))), {"input": x}, 24

    def adaptive_pool3d():
        x = _rand(rng, 1, 2, 4, 6, 5)
        return (lambda: ops.concat([ops.adaptive_pool3d(x, "max", (1, 2, 2)),
                                    ops.adaptive_pool3d(x, "avg", (1, 2, 2))])), {"input": x}, 24

    def linear():
        x, w, b = _rand(rng, 2, 5), _rand(rng, 4, 5), _rand(rng, 4)
        return (lambda: ops.linear(x, w, b)), {"input": x, "weight": w, "bias": b}, 20

    def shifted_leaky_relu():
        x = _rand(rng, 3, 7)
        return (lambda: ops.shifted_leaky_relu(x, 0.1, 0.1)), {"input": x}, 21

    def softmax():
        x = _rand(rng, 3, 6)
        return (lambda: ops.softmax(x)), {"input": x}, 18

    def sigmoid():
        x = _rand(rng, 4, 5)
        return (lambda: ops.sigmoid(x)), {"input": x}, 20

    def dropout2d():
        x = _rand(rng, 2, 6, 3, 3)
        return (lambda: ops.dropout2d(x, 0.5, True, np.random.default_rng(3))), {"input": x}, 24

    def pixel_shuffle():
        x = _rand(rng, 1, 8, 2, 3)
        return (lambda: ops.pixel_shuffle(x, 2)), {"input": x}, 24

    def pad_replicate():
        x = _rand(rng, 1, 2, 3, 4)
        return (lambda: ops.pad_replicate(x, ((1, 2), (0, 1)))), {"input": x}, 24

    def interpolate_nearest():
        x = _rand(rng, 1, 2, 3, 4)
        return (lambda: ops.interpolate(x, (7, 5), "nearest")), {"input": x}, 24

    def interpolate_bilinear():
        x = _rand(rng, 1, 2, 3, 4)
        return (lambda: ops.interpolate(x, (5, 9), "bilinear")), {"input": x}, 24

    def matmul():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)
        return (lambda: ops.matmul(a, b)), {"a": a, "b": b}, 24

    def mean_concat_reshape():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 1, 4)
        return (lambda: ops.reshape(ops.mean(ops.concat([a, b], 1), (2,)), (2, 4))), {"a": a, "b": b}, 24

    return _cases(locals())


def _block_cases(rng: np.random.Generator) -> dict[str, Callable]:
    from . import blocks
    from .nn import Activation

    act = Activation()

    def _scramble(module, scale=0.3):
        # zero-initialized biases and gates hide half of a block's wiring
        for _, p in module.named_parameters():
            if not np.any(p.data):
                p.data = (rng.standard_normal(p.shape) * scale).astype(DTYPE)
        return module

    def p3d_block_a():
        m = _scramble(blocks.P3DBlockA(2, 3, rng, mid=2, act=act))
        return _module_case(m, lambda: _rand(rng, 1, 2, 3, 4, 4), rng)

    def rc3d_block():
        m = _scramble(blocks.RC3DBlock(3, 3, rng, c_mid=2, act=act))
        return _module_case(m, lambda: _rand(rng, 1, 3, 3, 4, 4), rng)

    def rc3d_mp_block():
        m = _scramble(blocks.rc3d_mp_block(2, 4, rng, c_mid=2, act=act))
        return _module_case(m, lambda: _rand(rng, 1, 2, 3, 4, 4), rng)

    def stack_pool():
        x = _rand(rng, 2, 3, 2, 3, 3)
        return (lambda: blocks.stack_pool(x)), {"input": x}, 24

    def self_attention_2d():
        m = _scramble(blocks.SelfAttention2d(8, rng))
        return _module_case(m, lambda: _rand(rng, 1, 8, 3, 3), rng)

    def deconv_block():
        m = _scramble(blocks.DeconvBlock(4, 3, 8, rng, with_attention=True, act=act))
        skip = _rand(rng, 1, 3, 5, 5)
        x = _rand(rng, 1, 4, 2, 2)
        tensors = {"input": x, "skip": skip}
        tensors.update(dict(m.named_parameters()))
        return (lambda: m(x, skip)), tensors, 6

    def doconv():
        m = _scramble(blocks.DOConv(4, 3, rng, p=0.25, act=act))
        x = _rand(rng, 2, 4, 5, 5)
        tensors = {"input": x}
        tensors.update(dict(m.named_parameters()))
        return (lambda: m(x, np.random.default_rng(11))), tensors, 8

    return _cases(locals())


def _loss_cases(rng: np.random.Generator) -> dict[str, Callable]:
    from . import training

    def mse_loss():
        y_hat = _rand(rng, 2, 1, 4, 4)
        y = rng.standard_normal((2, 1, 4, 4))
        return (lambda: training.mse_loss(y_hat, y)), {"prediction": y_hat}, 24

    def bce_loss():
        q = Tensor(rng.uniform(0.05, 0.95, (3, 4)), requires_grad=True)
        y = (rng.random((3, 4)) > 0.5).astype(np.float64)
        return (lambda: training.bce_loss(q, y)), {"prediction": q}, 12

    def cross_entropy():
        z = _rand(rng, 4, 16)
        labels = rng.integers(0, 16, 4)
        return (lambda: training.cross_entropy(z, labels)), {"logits": z}, 24

    return _cases(locals())


def _network_cases(rng: np.random.Generator) -> dict[str, Callable]:
    from . import models

    profile = models.get_profile("toy", input_size=8, head_width=16,
                                 stages=((4,), (8,), (8,)), generator_widths=(4, 8, 8, 8, 8),
                                 critic_widths=(4, 8, 8))

    def _net_case(net, x, call=None, per_param=2):
        call = call or (lambda: net(x))
        tensors = {"input": x}
        tensors.update(dict(net.named_parameters()))
        return call, tensors, per_param

    def _perturb(net, scale=0.05):
        for _, p in net.named_parameters():
            if not np.any(p.data):
                p.data = (rng.standard_normal(p.shape) * scale).astype(DTYPE)
        return net

    def c3d_toy():
        net = models.build_c3d(profile, np.random.default_rng(1))
        return _net_case(net, _rand(rng, 1, 3, 3, 8, 8))

    def p3da_toy():
        net = _perturb(models.build_p3da(profile, np.random.default_rng(2)))
        return _net_case(net, _rand(rng, 1, 3, 3, 8, 8))

    def rc3d_toy():
        net = _perturb(models.build_rc3d(profile, np.random.default_rng(3)))
        return _net_case(net, _rand(rng, 1, 3, 3, 8, 8))

    def multistream_toy():
        cfg = models.StreamConfig(("rgb", "gdepth", "motion"), head_width=16)
        net = _perturb(models.MultiStreamNet(profile, cfg, np.random.default_rng(4)))
        inputs = {"rgb": _rand(rng, 1, 3, 3, 8, 8), "gdepth": _rand(rng, 1, 1, 3, 8, 8),
                  "motion": _rand(rng, 1, 3, 1, 8, 8)}
        tensors = dict(inputs)
        tensors.update(dict(net.named_parameters()))
        return (lambda: net(None, inputs=inputs)), tensors, 2

    def unet_generator_16():
        net = _perturb(models.build_unet_generator(profile, np.random.default_rng(5)), 0.3)
        return _net_case(net, _rand(rng, 1, 3, 16, 16), per_param=3)

    def critic_toy():
        net = _perturb(models.build_critic(profile, np.random.default_rng(6)), 0.3)
        x = _rand(rng, 2, 1, 16, 16)
        return _net_case(net, x, call=lambda: net(x, np.random.default_rng(9)))

    return _cases(locals())


def suite(seed: int = 0) -> dict[str, Callable]:
    """All gradient-check cases by group and name; each returns (fn, tensors, probes)."""
    rng = np.random.default_rng(seed)
    cases = {}
    for group, make in (("op", _op_cases), ("block", _block_cases), ("loss", _loss_cases),
                        ("network", _network_cases)):
        for name, case in make(rng).items():
            cases[f"{group}:{name}"] = case
    return cases


def run_suite(seed: int = 0, only: str | None = None, dtype=np.float64) -> list[GradReport]:
    reports = []
    for name, case in suite(seed).items():
        if only and only not in name:
            continue
        fn, tensors, probes = case()
        reports.append(run_case(name, fn, tensors, probes=probes, dtype=dtype))
    return reports
