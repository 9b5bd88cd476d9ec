"""Central finite-difference verification of recorded gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

STEP = 1e-5


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * weights).sum()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = STEP,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return any shape; non-scalar outputs are contracted
    with fixed random weights so every output element contributes.  The
    relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.

    Composites with parameters the output is invariant to (a key bias under
    softmax, say) have exact-zero gradients whose central differences are
    pure round-off near eps * |f| / step; a larger ``floor`` keeps those from
    dominating.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    weights = None
    if out.size != 1:
        weights = np.random.default_rng(seed).standard_normal(out.shape)
    loss = _scalarize(out, weights)
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def f() -> float:
        with no_grad():
            return float(_scalarize(fn(*inputs), weights).data)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst


OP_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3
COMPOSITE_FLOOR = 1e-6


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[Tensor], float]]:
    """(name, fn, inputs, tolerance) for every differentiable operation."""
    from . import blocks
    from . import tensor as T
    from .config import EmbedConfig

    def r(*shape, positive=False):
        x = rng.standard_normal(shape)
        return Tensor(np.abs(x) + 0.5 if positive else x)

    def away_from(x: Tensor, points: Sequence[float]) -> Tensor:
        # finite differences straddling a kink are meaningless; nudge those entries
        for p in points:
            x.data[np.abs(x.data - p) < 1e-3] += 0.01
        return x

    op = OP_TOLERANCE
    cases = [
        ("add", T.add, [r(3, 4), r(4)], op),
        ("sub", T.sub, [r(3, 4), r(3, 1)], op),
        ("mul", T.mul, [r(2, 3, 4), r(3, 4)], op),
        ("div", T.div, [r(3, 4), r(3, 4, positive=True)], op),
        ("neg", T.neg, [r(3, 4)], op),
        ("power", lambda a: T.power(a, 3), [r(3, 4)], op),
        ("exp", T.exp, [r(3, 4)], op),
        ("log", T.log, [r(3, 4, positive=True)], op),
        ("sigmoid", T.sigmoid, [r(3, 4)], op),
        ("softplus", T.softplus, [r(3, 4)], op),
        ("relu", T.relu, [away_from(r(3, 4), [0.0])], op),
        ("gelu", T.gelu, [r(3, 4)], op),
        ("clamp", lambda a: T.clamp(a, -0.5, 0.5), [away_from(r(3, 4), [-0.5, 0.5])], op),
        ("sum", lambda a: T.sum_(a, axis=(0, 2)), [r(2, 3, 4)], op),
        ("mean", lambda a: T.mean(a, axis=1), [r(2, 3, 4)], op),
        ("reshape", lambda a: T.reshape(a, (4, 6)), [r(2, 3, 4)], op),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)], op),
        ("slice", lambda a: a[:, 1:, ::2], [r(2, 3, 4)], op),
        ("concat", lambda a, b: T.concat([a, b], axis=-1), [r(2, 3, 2), r(2, 3, 4)], op),
        ("matmul", T.matmul, [r(2, 3, 4), r(2, 4, 5)], op),
        ("linear", T.linear, [r(2, 3, 4), r(4, 5), r(5)], op),
        ("softmax", lambda a: T.softmax(a, axis=-1, scale=0.7), [r(3, 5)], op),
        ("layernorm", lambda a, w, b: T.layernorm(a, -1, 1e-5, w, b), [r(2, 3, 5), r(5), r(5)], op),
        ("conv2d", lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=1), [r(2, 2, 6, 6), r(3, 2, 3, 3), r(3)], op),
        ("unfold_patches", lambda a: T.unfold_patches(a, 2), [r(2, 1, 4, 6)], op),
        ("fold_patches", lambda a: T.fold_patches(a, 2, 4, 6), [r(2, 4, 6)], op),
        ("attention", lambda q, k, v: T.attention(q, k, v, 0.6)[0], [r(2, 2, 4, 3), r(2, 2, 5, 3), r(2, 2, 5, 2)], op),
    ]

    # composite: one full denseblock on a tiny embedding, gradients wrt input and every parameter
    params: dict = {}
    blocks.init_denseblock(params, "b", 8, 8, rng)
    names = list(params)
    feat = r(1, 4, 8)

    def dense(x, *values):
        local = dict(zip(names, values))
        return blocks.denseblock(x, local, "b", heads=2, groups=2)

    cases.append(("denseblock", dense, [feat] + [params[n] for n in names], COMPOSITE_TOLERANCE))

    embed_cfg = EmbedConfig(image_h=4, image_w=4, grid=2, channel_mult=2)
    eparams: dict = {}
    blocks.init_patch_embed(eparams, "e", embed_cfg, rng)
    blocks.init_patch_deembed(eparams, "d", embed_cfg, embed_cfg.embed_dim, rng)
    enames = list(eparams)

    def roundtrip(x, *values):
        local = dict(zip(enames, values))
        return blocks.patch_deembed(blocks.patch_embed(x, embed_cfg, local, "e"), embed_cfg, local, "d")

    cases.append(("embed_deembed", roundtrip, [r(2, 1, 4, 4)] + [eparams[n] for n in enames], COMPOSITE_TOLERANCE))
    return cases


def run_suite(seeds: Sequence[int] = (0, 1, 2)) -> list[tuple[str, int, float, float]]:
    """Grad-check every operation under each seed; rows are (name, seed, error, tolerance)."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, inputs, tol in _cases(rng):
            floor = COMPOSITE_FLOOR if tol == COMPOSITE_TOLERANCE else 1e-8
            rows.append((name, seed, grad_check(fn, inputs, seed=seed, floor=floor), tol))
    return rows
