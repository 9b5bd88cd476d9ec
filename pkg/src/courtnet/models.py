"""Prosecution, defendant and jury networks and their confidence-weighted fusion."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import blocks
from . import tensor as T
from .config import DefendantConfig, JuryConfig, ProsecutionConfig, RunConfig
from .tensor import ShapeError, Tensor, no_grad

KINDS = ("prosecution", "defendant", "jury")


class ModelParams:
    """Ordered, named parameter tensors of one network."""

    def __init__(self, kind: str, tensors: "OrderedDict[str, Tensor] | None" = None):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        self.kind = kind
        self.tensors: OrderedDict[str, Tensor] = tensors if tensors is not None else OrderedDict()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def get(self, name: str, default=None):
        return self.tensors.get(name, default)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.tensors.items()),
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}


# ---------------------------------------------------------------------------
# prosecution: densely connected transformer
# ---------------------------------------------------------------------------
def init_prosecution(cfg: ProsecutionConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams("prosecution")
    blocks.init_patch_embed(p, "embed", cfg.embed, rng)
    for i in range(cfg.n_blocks):
        blocks.init_denseblock(p, f"block{i}", cfg.width_after(i), cfg.growth, rng)
    blocks.init_patch_deembed(p, "deembed", cfg.embed, cfg.width_after(cfg.n_blocks), rng, cfg.out_bias)
    return p


def prosecution_forward(x: Tensor, params: ModelParams, cfg: ProsecutionConfig, trace: list | None = None) -> Tensor:
    feat = blocks.patch_embed(x, cfg.embed, params, "embed")
    for i in range(cfg.n_blocks):
        rec = {} if trace is not None else None
        feat = blocks.denseblock(feat, params, f"block{i}", cfg.heads, cfg.groups, rec)
        if trace is not None:
            trace.append(rec)
    return blocks.patch_deembed(feat, cfg.embed, params, "deembed")


# ---------------------------------------------------------------------------
# defendant: plain ViT
# ---------------------------------------------------------------------------
def init_defendant(cfg: DefendantConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams("defendant")
    blocks.init_patch_embed(p, "embed", cfg.embed, rng)
    for i in range(cfg.n_blocks):
        blocks.init_vit_block(p, f"block{i}", cfg.embed.embed_dim, rng)
    blocks.init_patch_deembed(p, "deembed", cfg.embed, cfg.embed.embed_dim, rng, cfg.out_bias)
    return p


def defendant_forward(x: Tensor, params: ModelParams, cfg: DefendantConfig, trace: list | None = None) -> Tensor:
    feat = blocks.patch_embed(x, cfg.embed, params, "embed")
    for i in range(cfg.n_blocks):
        rec = {} if trace is not None else None
        feat = blocks.vit_block(feat, params, f"block{i}", cfg.heads, rec)
        if trace is not None:
            trace.append(rec)
    return blocks.patch_deembed(feat, cfg.embed, params, "deembed")


# ---------------------------------------------------------------------------
# jury: conv + fully connected confidence head
# ---------------------------------------------------------------------------
def init_jury(cfg: JuryConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams("jury")
    cin = 2
    for i, cout in enumerate(cfg.conv_channels):
        fan_in = cin * 9
        p[f"conv{i}.k"] = Tensor(rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / fan_in), True, f"conv{i}.k")
        p[f"conv{i}.b"] = Tensor(np.zeros(cout), True, f"conv{i}.b")
        cin = cout
    fh, fw = cfg.feature_hw
    width = cin * fh * fw
    for i, hidden in enumerate(tuple(cfg.fc_hidden) + (1,)):
        blocks.init_linear(p, f"fc{i}", width, hidden, rng)
        width = hidden
    return p


def jury_logit(x: Tensor, candidate: Tensor, params: ModelParams, cfg: JuryConfig) -> Tensor:
    x, candidate = T._as_tensor(x), T._as_tensor(candidate)
    if x.shape != candidate.shape or x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"jury expects matching [B,1,H,W] image and candidate, got {x.shape}, {candidate.shape}")
    if x.shape[2:] != (cfg.image_h, cfg.image_w):
        raise ShapeError(f"jury configured for {cfg.image_h}x{cfg.image_w}, got {x.shape[2:]}")
    h = T.concat([x, candidate], axis=1)
    for i in range(len(cfg.conv_channels)):
        h = T.relu(T.conv2d(h, params[f"conv{i}.k"], params[f"conv{i}.b"], stride=2, padding=1))
    h = h.reshape(h.shape[0], -1)
    n_fc = len(cfg.fc_hidden) + 1
    for i in range(n_fc):
        h = T.linear(h, params[f"fc{i}.w"], params[f"fc{i}.b"])
        if i < n_fc - 1:
            h = T.relu(h)
    return h.reshape(h.shape[0])


def jury_confidence(x: Tensor, candidate: Tensor, params: ModelParams, cfg: JuryConfig) -> Tensor:
    """Confidence in (0,1) that ``candidate`` is a true target mask for ``x``; shape [B]."""
    return T.sigmoid(jury_logit(x, candidate, params, cfg))


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------
def fusion_weights(c_p: Tensor, c_d: Tensor) -> tuple[Tensor, Tensor]:
    """Normalized weights c/(c_p + c_d); both zero falls back to 0.5 each."""
    c_p, c_d = T._as_tensor(c_p), T._as_tensor(c_d)
    if np.any(c_p.data < 0) or np.any(c_d.data < 0):
        raise ValueError("confidences must be non-negative")
    zero = (c_p.data + c_d.data) <= 0
    if np.any(zero):
        # 0/0 is undefined; treat those samples as equally confident
        c_p = c_p + zero.astype(np.float64)
        c_d = c_d + zero.astype(np.float64)
    w_p = c_p / (c_p + c_d)
    # 1 - w_p (not c_d / total) keeps w_p + w_d == 1 exact in floating point
    return w_p, 1.0 - w_p


def fuse(y_p: Tensor, y_d: Tensor, c_p: Tensor, c_d: Tensor) -> Tensor:
    """Y = w_p Y_P + w_d Y_D with per-sample weights broadcast over pixels."""
    y_p, y_d = T._as_tensor(y_p), T._as_tensor(y_d)
    if y_p.shape != y_d.shape:
        raise ShapeError(f"fuse: {y_p.shape} vs {y_d.shape}")
    w_p, w_d = fusion_weights(c_p, c_d)
    B = y_p.shape[0]
    if w_p.shape != (B,):
        raise ShapeError(f"fuse: confidences must have shape ({B},), got {w_p.shape}")
    return y_p * w_p.reshape(B, 1, 1, 1) + y_d * w_d.reshape(B, 1, 1, 1)


# ---------------------------------------------------------------------------
# the full detector
# ---------------------------------------------------------------------------
@dataclass
class CourtNet:
    config: RunConfig = field(default_factory=RunConfig)
    prosecution: ModelParams | None = None
    defendant: ModelParams | None = None
    jury: ModelParams | None = None

    def __post_init__(self):
        if self.config.prosecution.embed != self.config.defendant.embed:
            raise ValueError("prosecution and defendant must share the embedding geometry")

    @classmethod
    def initialize(cls, config: RunConfig | None = None, seed: int | None = None) -> "CourtNet":
        config = config or RunConfig()
        seed = config.train.seed if seed is None else seed
        # independent streams per network so changing one architecture leaves the others fixed
        rp, rd, rj = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(
            config=config,
            prosecution=init_prosecution(config.prosecution, rp),
            defendant=init_defendant(config.defendant, rd),
            jury=init_jury(config.jury, rj),
        )

    def networks(self) -> dict[str, ModelParams]:
        return {"prosecution": self.prosecution, "defendant": self.defendant, "jury": self.jury}

    def prosecute(self, x, trace: list | None = None) -> Tensor:
        return prosecution_forward(T._as_tensor(x), self.prosecution, self.config.prosecution, trace)

    def defend(self, x, trace: list | None = None) -> Tensor:
        return defendant_forward(T._as_tensor(x), self.defendant, self.config.defendant, trace)

    def judge(self, x, candidate) -> Tensor:
        return jury_confidence(x, candidate, self.jury, self.config.jury)

    def judge_logit(self, x, candidate) -> Tensor:
        return jury_logit(T._as_tensor(x), T._as_tensor(candidate), self.jury, self.config.jury)

    def fused(self, x) -> Tensor:
        """Soft fused map; equal weights when trained without the jury."""
        x = T._as_tensor(x)
        with no_grad():
            y_p = self.prosecute(x)
            y_d = self.defend(x)
            if self.config.train.no_jury:
                ones = Tensor(np.ones(x.shape[0]))
                return fuse(y_p, y_d, ones, ones)
            return fuse(y_p, y_d, self.judge(x, y_p), self.judge(x, y_d))

    def detect(self, x, threshold: float | None = None) -> np.ndarray:
        return detect(x, self, threshold)


def detect(x, net: CourtNet, threshold: float | None = None) -> np.ndarray:
    """Binary {0,1} mask of shape [B,1,H,W] from the fused map (default threshold 0.5)."""
    threshold = net.config.threshold if threshold is None else threshold
    return (net.fused(x).data > threshold).astype(np.float64)
