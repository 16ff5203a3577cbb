"""Finite-difference checks for every tensor op and for the composed losses.

Each op is wrapped as ``sum(op(...) * W)`` with a fixed random ``W`` so every
output element contributes a distinct weight to the scalar.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

import plat.autodiff as ad
from plat.autodiff import GradCheckReport, Tensor, grad_check
from plat.backbone import Backbone, BackboneConfig
from plat.data import Vocab, generate_corpus, question_ids, render_cot, render_plat
from plat.model import ModelBundle, PlannerConfig
from plat.training.sft import cot_loss, plat_loss

STEP = 1e-6
TOL = 1e-4
# Composed losses are O(1) so central differences carry ~|f| * eps / h = 1e-9 of
# rounding noise; the floor keeps exactly-zero grads (e.g. attention key biases)
# from reading that noise as a relative error. Elementwise ops use 1e-6.
MODEL_FLOOR = 1e-5


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _leaf(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return ad.parameter(x)


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, w))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    ids = np.array([[1, 3, 0], [2, 2, 4]])
    mask = np.array([[True, True, False, True]] * 3)
    cases: dict[str, tuple[Callable, list[Tensor]]] = {
        "add": (lambda a, b: ad.add(a, b), [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "add-bias": (lambda a, b: ad.add(a, b), [_leaf(rng, 2, 3, 4), _leaf(rng, 4)]),
        "mul": (lambda a, b: ad.mul(a, b), [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "neg": (lambda a: ad.neg(a), [_leaf(rng, 3, 4)]),
        "scale": (lambda a: ad.scale(a, -1.7), [_leaf(rng, 3, 4)]),
        "exp": (lambda a: ad.exp(a), [_leaf(rng, 3, 4)]),
        # inputs kept well apart so no element sits on the kink
        "minimum": (lambda a, b: ad.minimum(a, b),
                    [ad.parameter(np.array([[0.0, 2.0], [1.0, -1.0]])),
                     ad.parameter(np.array([[1.0, 1.0], [-1.0, 0.5]]))]),
        "clip": (lambda a: ad.clip(a, -0.5, 0.5), [ad.parameter(np.array([[-1.0, -0.2], [0.3, 0.9]]))]),
        "matmul": (lambda a, b: ad.matmul(a, b), [_leaf(rng, 3, 4), _leaf(rng, 4, 5)]),
        "matmul-batched": (lambda a, b: ad.matmul(a, b), [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)]),
        "transpose-2d": (lambda a: ad.transpose(a), [_leaf(rng, 3, 4)]),
        "reshape": (lambda a: ad.reshape(a, (4, 3)), [_leaf(rng, 3, 4)]),
        "slice": (lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [_leaf(rng, 3, 4)]),
        "slice-fancy": (lambda a: ad.slice_(a, np.array([0, 2, 2])), [_leaf(rng, 3, 4)]),
        "concat-seq": (lambda a, b: ad.concat([a, b], axis=-2), [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)]),
        "stack": (lambda a, b: ad.stack([a, b], axis=1), [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "sum": (lambda a: ad.sum_(a, axis=-1), [_leaf(rng, 3, 4)]),
        "mean": (lambda a: ad.mean(a), [_leaf(rng, 3, 4)]),
        "softmax-lastdim": (lambda a: ad.softmax(a), [_leaf(rng, 3, 4)]),
        "softmax-masked": (lambda a: ad.softmax(a, mask), [_leaf(rng, 3, 4)]),
        "log-softmax": (lambda a: ad.log_softmax(a), [_leaf(rng, 3, 4)]),
        "layernorm-lastdim": (lambda a, g, b: ad.layernorm(a, g, b),
                              [_leaf(rng, 3, 4), _leaf(rng, 4), _leaf(rng, 4)]),
        "gelu": (lambda a: ad.gelu(a), [_leaf(rng, 3, 4)]),
        "embedding-lookup": (lambda t: ad.embedding(t, ids), [_leaf(rng, 5, 4)]),
        "cross-entropy-logits": (lambda a: ad.cross_entropy(a, np.array([[0, 3, 1], [2, 2, 4]])),
                                 [_leaf(rng, 2, 3, 5)]),
        "linear": (lambda x, w, b: ad.linear(x, w, b), [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)]),
    }
    return {name: (lambda *xs, fn=fn, s=i: _weighted(fn(*xs), 1000 + s), inputs)
            for i, (name, (fn, inputs)) in enumerate(cases.items())}


def tiny_backbone_config(vocab: Vocab, n_layers: int = 1, n_planner_layers: int = 0) -> BackboneConfig:
    return BackboneConfig(vocab_size=len(vocab), d_model=16, n_layers=n_layers,
                          n_planner_layers=n_planner_layers, n_heads=2, max_seq_len=48, init_std=0.3)


def transformer_case(seed: int = 0):
    """One-layer transformer CoT loss on two short sequences."""
    vocab = Vocab()
    bb = Backbone(tiny_backbone_config(vocab), seed=seed)
    samples = generate_corpus(seed, 2, step_range=(1, 1), operand_range=(1, 9), max_value=20)
    batch = [render_cot(s, vocab) for s in samples]
    params = [bb.params[k] for k in bb.base_parameter_names()]
    return (lambda *_: cot_loss(bb, batch, vocab.special.pad)[0]), params


def plat_case(seed: int = 0):
    """Full PLaT-SFT loss: encoder, two latent slots, EMA, fixed noise, decoder."""
    vocab = Vocab()
    bcfg = tiny_backbone_config(vocab, n_layers=1, n_planner_layers=1)
    pcfg = PlannerConfig(d_latent=8, n_latent=2, alpha_ema=0.5, noise_std=0.1, max_plan_steps=3)
    bundle = ModelBundle.create(bcfg, pcfg, vocab.special, seed=seed)
    samples = generate_corpus(seed, 2, step_range=(1, 2), operand_range=(1, 9), max_value=20)
    qs = [question_ids(s, vocab) for s in samples]
    segs = [render_plat(s, vocab) for s in samples]

    def f(*_):
        return plat_loss(bundle, qs, segs, pcfg.noise_std, np.random.default_rng(seed)).mean

    return f, list(bundle.parameters().values())


def run_suite(seed: int = 0, step: float = STEP, tol: float = TOL, max_elements: int = 16,
              include_models: bool = True, model_floor: float = MODEL_FLOOR) -> list[CaseResult]:
    out = []
    for name, (f, inputs) in op_cases(seed).items():
        t0 = time.time()
        rep = grad_check(f, inputs, step=step, tol=tol)
        out.append(CaseResult(f"op:{name}", rep, time.time() - t0))
    if include_models:
        for name, builder in (("transformer-1layer", transformer_case), ("plat-sft", plat_case)):
            f, inputs = builder(seed)
            t0 = time.time()
            rep = grad_check(f, inputs, step=step, tol=tol, floor=model_floor,
                             max_elements=max_elements, seed=seed)
            out.append(CaseResult(f"loss:{name}", rep, time.time() - t0))
    return out
