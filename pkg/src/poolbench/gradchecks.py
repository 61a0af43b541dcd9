"""Finite-difference checks over every primitive, pooling pipeline, head and loss.

Each check builds a small random instance (inputs uniform in [-2, 2]) and
reduces any non-scalar output with a fixed random projection, so that
constant-sum outputs such as softmax still carry a gradient signal.
"""

from __future__ import annotations

import operator
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from . import pooling as pl
from .encoder import EncoderConfig, LayerStates, encode, init_encoder
from .head_loss import FocalConfig, focal_loss, head_forward, init_head
from .model import build_model
from .numerics import GradCheckReport, Tensor

H_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        n = sum(e.size for e in self.report.entries)
        return f"{status}  {self.name:<34s} max_rel_err={self.report.max_rel_error:.3e}  ({n} values)"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_rel_error": self.report.max_rel_error,
            "seconds": self.seconds,
            "params": {e.name: e.max_rel_error for e in self.report.entries},
        }


class _Case:
    def __init__(self, seed: int, name: str):
        self.rng = nx.rng_stream(seed, "gradcheck/" + name)
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, *shape, lo: float = -2.0, hi: float = 2.0) -> Tensor:
        t = Tensor(self.rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def scalarize(self, out_fn: Callable[[], Tensor]) -> Callable[[], Tensor]:
        probe = {}

        def f():
            out = out_fn()
            if out.size == 1:
                return out.sum()
            if "w" not in probe:
                probe["w"] = self.rng.uniform(-1.0, 1.0, size=out.shape)
            return (out * probe["w"]).sum()

        return f


def _mask(b: int, t: int) -> np.ndarray:
    m = np.zeros((b, t))
    for i in range(b):
        m[i, : max(1, t - i)] = 1.0
    return m


def _randomize(params: dict[str, Tensor], rng, scale: float = 0.5) -> None:
    for p in params.values():
        p.data[...] = rng.uniform(-scale, scale, size=p.shape)


def _unary(fn, *shape, lo: float = -2.0, hi: float = 2.0):
    def build(c: _Case):
        a = c.param("a", *shape, lo=lo, hi=hi)
        return lambda: fn(a)

    return build


def _binary(fn, shape_a, shape_b, b_range=(-2.0, 2.0)):
    def build(c: _Case):
        a = c.param("a", *shape_a)
        b = c.param("b", *shape_b, lo=b_range[0], hi=b_range[1])
        return lambda: fn(a, b)

    return build


def _layer_states(c: _Case, layers: int = 3, b: int = 2, t: int = 4, h: int = 3) -> LayerStates:
    return LayerStates([c.param(f"state{i}", b, t, h) for i in range(layers)])


def _layer_norm_case(c: _Case):
    x, gamma, beta = c.param("x", 2, 8), c.param("gamma", 8), c.param("beta", 8)
    return lambda: nx.layer_norm(x, gamma, beta)


def _combine_case(c: _Case):
    states, w = _layer_states(c), c.param("w", 3)
    return lambda: pl.weighted_layer_combine(states, w)


def _attention_case(c: _Case):
    h, q, p = c.param("h", 2, 4, 3), c.param("queries", 2, 3), c.param("projection", 6, 3)
    return lambda: pl.attention_pool(h, _mask(2, 4), q, p)


def _gated_case(c: _Case):
    a, b = c.param("a", 2, 3), c.param("b", 2, 3)
    g, gb = c.param("gate.weight", 6, 6), c.param("gate.bias", 6)
    return lambda: pl.gated_fusion([a, b], g, gb)


def _ops(seed: int) -> dict[str, Callable[[], tuple]]:
    def case(name, build):
        def run():
            c = _Case(seed, name)
            out_fn = build(c)
            return c.scalarize(out_fn), c.params

        return run

    def dropout_rng():
        return nx.rng_stream(seed, "gradcheck/dropout-mask")

    checks = {
        "op/add_broadcast": _binary(operator.add, (3, 4), (4,)),
        "op/sub_broadcast": _binary(operator.sub, (3, 4), (3, 1)),
        "op/mul_broadcast": _binary(operator.mul, (2, 3, 4), (4,)),
        "op/div": _binary(operator.truediv, (3, 4), (3, 4), b_range=(0.5, 2.0)),
        "op/exp": _unary(nx.exp, 3, 4),
        "op/log": _unary(nx.log, 3, 4, lo=0.5),
        "op/tanh": _unary(nx.tanh, 3, 4),
        "op/sigmoid": _unary(nx.sigmoid, 3, 4),
        "op/gelu": _unary(nx.gelu, 3, 4),
        "op/softmax": _unary(nx.softmax, 3, 5),
        "op/softmax_axis0": _unary(lambda a: nx.softmax(a, axis=0), 3, 5),
        "op/log_softmax": _unary(nx.log_softmax, 3, 5),
        "op/matmul": _binary(operator.matmul, (3, 4), (4, 2)),
        "op/matmul_batched": _binary(operator.matmul, (2, 3, 4), (4, 2)),
        "op/matmul_4d": _binary(operator.matmul, (2, 2, 3, 4), (2, 2, 4, 3)),
        "op/sum_mean": _unary(lambda a: a.sum(axis=1) * a.mean(axis=(0, 2)).sum(), 2, 3, 4),
        "op/reshape_transpose": _unary(lambda a: a.transpose(2, 0, 1).reshape(4, 6), 2, 3, 4),
        "op/concat": _binary(lambda a, b: nx.concat([a, b], axis=-1), (2, 3), (2, 2)),
        "op/stack": _binary(lambda a, b: nx.stack([a, b], axis=0), (2, 3), (2, 3)),
        "op/embedding": _unary(lambda a: nx.embedding(a, np.array([[0, 2, 2], [4, 1, 0]])), 5, 3),
        "op/mask_fill_softmax": _unary(lambda a: nx.softmax(nx.mask_fill(a, _mask(2, 4) > 0)), 2, 4),
        "op/layer_norm": _layer_norm_case,
        "op/masked_mean": _unary(lambda h: nx.masked_mean(h, _mask(3, 4)), 3, 4, 2),
        "op/dropout": _unary(lambda x: nx.dropout(x, 0.3, True, dropout_rng()), 4, 5),
        "pool/weighted_layer_combine": _combine_case,
        "pool/attention_pool": _attention_case,
        "pool/gated_fusion": _gated_case,
    }

    def pipeline(kind):
        def build(c: _Case):
            states = _layer_states(c)
            cfg = pl.init_pooling(kind, len(states), 3, attention_heads=2, seed=seed)
            _randomize(cfg.parameters, c.rng, 1.0)
            c.params.update(cfg.parameters)
            return lambda: pl.pool(cfg, states, _mask(2, 4))

        return build

    for kind in pl.KINDS:
        checks[f"pipeline/{kind}"] = pipeline(kind)

    def encoder_case(c: _Case):
        cfg = EncoderConfig(num_layers=2, hidden=4, heads=2, ffn_dim=6, vocab_size=7, max_positions=5)
        params = init_encoder(cfg, seed)
        _randomize(params.tensors, c.rng)
        c.params.update(params.tensors)
        ids = c.rng.integers(0, 7, size=(2, 4))
        return lambda: encode(params, ids, _mask(2, 4)).final

    def head_case(training):
        def build(c: _Case):
            params = init_head(4, seed)
            _randomize(params.tensors, c.rng)
            c.params.update(params.tensors)
            x = c.param("pooled", 3, 4)
            if training:
                return lambda: head_forward(params, x, True, nx.rng_stream(seed, "gradcheck/head-masks"))
            return lambda: head_forward(params, x)

        return build

    def focal_case(gamma, alpha):
        def build(c: _Case):
            z = c.param("logits", 6, 2)
            labels = np.array([0, 1, 1, 0, 1, 0])
            return lambda: focal_loss(z, labels, FocalConfig(gamma, alpha))

        return build

    checks["encoder/2_layer"] = encoder_case
    checks["head/eval"] = head_case(False)
    checks["head/multi_sample_dropout"] = head_case(True)
    checks["loss/focal_gamma2"] = focal_case(2.0, 0.5)
    checks["loss/focal_gamma0.5_alpha0.25"] = focal_case(0.5, 0.25)
    checks["loss/focal_gamma0_ce"] = focal_case(0.0, 0.5)

    def model_case(kind):
        def build(c: _Case):
            cfg = EncoderConfig(num_layers=2, hidden=4, heads=2, ffn_dim=6, vocab_size=7, max_positions=5)
            model = build_model(cfg, kind, attention_heads=2, seed=seed)
            params = model.parameters()
            _randomize(params, c.rng)
            c.params.update(params)
            ids = c.rng.integers(0, 7, size=(3, 4))
            labels = np.array([0, 1, 1])

            def f():
                rngs = (nx.rng_stream(seed, "gradcheck/enc-drop"), nx.rng_stream(seed, "gradcheck/head-drop"))
                return focal_loss(model.forward(ids, _mask(3, 4), True, rngs), labels)

            return f

        return build

    for kind in pl.KINDS:
        checks[f"model/{kind}"] = model_case(kind)

    return {name: case(name, build) for name, build in checks.items()}


def check_names(seed: int = 0) -> list[str]:
    return list(_ops(seed))


def run_gradchecks(seed: int = 0, h: float = H_STEP, tol: float = TOLERANCE, only=None) -> list[CheckResult]:
    results = []
    for name, make in _ops(seed).items():
        if only is not None and name not in only:
            continue
        start = time.perf_counter()
        f, params = make()
        report = nx.grad_check(f, params, h=h, tol=tol)
        results.append(CheckResult(name, report, time.perf_counter() - start))
    return results
