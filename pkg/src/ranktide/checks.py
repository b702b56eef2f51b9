"""Finite-difference verification suite covering every op and the full model.

Random instances are seeded, inputs are kept away from non-smooth points
(relu kinks, coincident norms, max/min ties), and each entry reports its max
relative error against central differences. The CLI `gradcheck` command runs
this and exits nonzero on any failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses, network
from .autodiff import Value, grad_check
from .network import ModelConfig, BackboneConfig

OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    passed: bool


def _away_from_zero(rng, shape, margin=0.2):
    # keeps |x| >= margin so eps-perturbations never cross the relu kink
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(margin, 1.0 + margin, size=shape)


def _distinct(rng, n, gap=5e-2):
    # entries pairwise separated so max/min selections are stable under eps
    base = rng.permutation(n) * gap * 2.0
    return base + rng.uniform(-gap * 0.4, gap * 0.4, size=n)


def _op_cases(rng) -> list[tuple[str, callable, list[Value]]]:
    a34 = Value(rng.standard_normal((3, 4)))
    b42 = Value(rng.standard_normal((4, 2)))
    vec6 = Value(rng.standard_normal(6))
    vec6b = Value(rng.standard_normal(6))
    small = Value(rng.standard_normal((2, 3)))
    small2 = Value(rng.standard_normal((2, 3)))
    scal = Value(rng.uniform(0.5, 1.5, size=1))
    fmap = Value(rng.standard_normal((3, 4, 4)))
    bias = Value(rng.standard_normal(3))
    relu_in = Value(_away_from_zero(rng, (2, 3)))
    sqrt_in = Value(rng.uniform(0.5, 2.0, size=5))
    sel_in = Value(_distinct(rng, 6))
    norm_in = Value(_away_from_zero(rng, 5))
    conv_x = Value(rng.standard_normal((3, 8, 8)))
    conv_x7 = Value(rng.standard_normal((3, 7, 7)))
    conv_w = Value(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    lin_x = Value(rng.standard_normal(5))
    lin_w = Value(rng.standard_normal((3, 5)))
    lin_b = Value(rng.standard_normal(3))
    sc = [Value(rng.standard_normal(1)) for _ in range(4)]

    def s(v):  # reduce any op output to a scalar objective
        return ad.vsum(ad.mul(v, v)) if v.data.size > 1 else ad.mul(v, v)

    return [
        ("matmul", lambda a, b: s(ad.matmul(a, b)), [a34, b42]),
        ("add", lambda a, b: s(ad.add(a, b)), [small, small2]),
        ("sub", lambda a, b: s(ad.sub(a, b)), [small, small2]),
        ("mul", lambda a, b: s(ad.mul(a, b)), [small, small2]),
        ("scale", lambda a: s(ad.scale(a, -1.7)), [small]),
        ("scale_by", lambda a, c: s(ad.scale_by(a, c)), [small, scal]),
        ("div_by", lambda a, c: s(ad.div_by(a, c)), [small, scal]),
        ("relu", lambda a: s(ad.relu(a)), [relu_in]),
        ("sigmoid", lambda a: s(ad.sigmoid(a)), [small]),
        ("sqrt", lambda a: s(ad.sqrt(a)), [sqrt_in]),
        ("softmax", lambda a: s(ad.softmax(a, axis=0)), [vec6]),
        ("softmax_rows", lambda a: s(ad.softmax(a, axis=1)), [a34]),
        ("sum", lambda a: ad.mul(ad.vsum(a), ad.vsum(a)), [small]),
        ("sum_axis", lambda a: s(ad.vsum(a, axis=1)), [a34]),
        ("mean", lambda a: ad.mul(ad.vmean(a), ad.vmean(a)), [small]),
        ("vmax", lambda a: ad.mul(ad.vmax(a), ad.vmax(a)), [sel_in]),
        ("vmin", lambda a: ad.mul(ad.vmin(a), ad.vmin(a)), [sel_in]),
        ("global_avg_pool", lambda a: s(ad.global_avg_pool(a)), [fmap]),
        ("avg_pool2x2", lambda a: s(ad.avg_pool2x2(a)), [fmap]),
        ("reshape", lambda a: s(ad.reshape(a, (6,))), [small]),
        ("transpose", lambda a: s(ad.transpose(a)), [a34]),
        ("stack_scalars", lambda *v: s(ad.stack_scalars(v)), sc),
        ("pick", lambda a: ad.mul(ad.pick(a, 2), ad.pick(a, 2)), [vec6]),
        ("dot", lambda a, b: ad.mul(ad.dot(a, b), ad.dot(a, b)), [vec6, vec6b]),
        ("linear", lambda x, w, b: s(ad.linear(x, w, b)), [lin_x, lin_w, lin_b]),
        ("l2norm", lambda a: ad.mul(ad.l2norm(a), ad.l2norm(a)), [norm_in]),
        ("logsumexp", lambda a: ad.mul(ad.logsumexp(a), ad.logsumexp(a)), [vec6]),
        ("conv2d", lambda x, w: s(ad.conv2d(x, w, stride=1, pad=1)), [conv_x, conv_w]),
        ("conv2d_s2", lambda x, w: s(ad.conv2d(x, w, stride=2, pad=0)), [conv_x7, conv_w]),
        ("add_channel_bias", lambda x, b: s(ad.add_channel_bias(x, b)), [fmap, bias]),
        ("cross_entropy", lambda a: losses.cross_entropy(a, 1), [vec6]),
        ("deviation_loss",
         lambda *f: losses.deviation_loss(list(f)),
         [Value(_distinct(rng, 5) + 1.0) for _ in range(4)]),
    ]


def _composite_case(rng):
    """Full graph: backbone -> spatial attention -> segment weights ->
    aggregation -> classifier -> joint loss, checked w.r.t. all parameters."""
    cfg = ModelConfig(backbone=BackboneConfig(channels=[4], in_channels=1), num_classes=3)
    params = network.init_params(cfg, seed=int(rng.integers(1 << 30)))
    # nonzero attention parameters so their gradients are exercised too
    params["attn.q"].data[:] = rng.standard_normal(params["attn.q"].shape) * 0.5
    params["attn.w_y"].data[:] = rng.standard_normal(params["attn.w_y"].shape) * 0.3
    images = [rng.standard_normal((1, 16, 16)) for _ in range(4)]
    label = int(rng.integers(3))
    names = sorted(params)

    def f(*plist):
        pdict = dict(zip(names, plist))
        result = network.forward([Value(im) for im in images], pdict, cfg)
        total, _ = losses.total_loss(result.logits, label, result.features, 0.03)
        return total

    return f, [params[n] for n in names]


def run_suite(tol: float = OP_TOL, composite_tol: float = COMPOSITE_TOL,
              instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """Gradient-check every op and the end-to-end composite on seeded
    random instances; returns one result row per check name."""
    worst: dict[str, float] = {}
    for inst in range(instances):
        rng = np.random.default_rng(seed + 1000 * inst)
        for name, f, inputs in _op_cases(rng):
            report = grad_check(f, inputs, tol=tol)
            worst[name] = max(worst.get(name, 0.0), report.max_error)
    for inst in range(instances):
        rng = np.random.default_rng(seed + 7777 + 1000 * inst)
        f, inputs = _composite_case(rng)
        # eps=1e-6: a relu kink crossed by the probe contributes at most
        # ~slope_jump*eps/2, keeping the check valid at generic random points
        report = grad_check(f, inputs, eps=1e-6, tol=composite_tol)
        worst["model_composite"] = max(worst.get("model_composite", 0.0), report.max_error)

    results = []
    for name, err in worst.items():
        t = composite_tol if name == "model_composite" else tol
        results.append(CheckResult(name=name, max_error=err, tol=t, passed=err <= t))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_error:>12.3e}  {r.tol:>8.0e}  {status}")
    return "\n".join(lines)
