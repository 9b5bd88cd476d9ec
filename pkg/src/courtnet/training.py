"""Adam with linear warm-up, the alternating three-network loop, checkpoints."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .config import AdamConfig, RunConfig, Schedule
from .data import Sample, stack_batch
from .models import CourtNet, ModelParams
from .tensor import Tensor, concat, no_grad

MAGIC = b"CNT1"
VERSION = 1
LOG_COLUMNS = ("epoch", "loss_P", "loss_D", "loss_J", "soft_pr", "soft_re", "lr")


class NumericalError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or incompatible."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, cfg: AdamConfig = AdamConfig()) -> "AdamState":
        return cls(
            m={k: np.zeros(t.shape) for k, t in params.items()},
            v={k: np.zeros(t.shape) for k, t in params.items()},
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the accumulated ``grad`` of each parameter.

    A parameter without a gradient is treated as having a zero gradient.
    """
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient in {params.kind}/{name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        m, v = state.m[name], state.v[name]
        g = t.grad
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(step: int, schedule: Schedule = Schedule()) -> float:
    """Linear warm-up from lr_start to lr_max over warmup_steps, then constant."""
    if step >= schedule.warmup_steps:
        return schedule.lr_max
    frac = step / schedule.warmup_steps
    return schedule.lr_start + frac * (schedule.lr_max - schedule.lr_start)


@contextlib.contextmanager
def frozen(params: ModelParams):
    """Stop gradient accumulation into ``params`` while inside the block."""
    prev = [t.requires_grad for t in params.values()]
    for t in params.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for t, r in zip(params.values(), prev):
            t.requires_grad = r


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainState:
    net: CourtNet
    optim: dict[str, AdamState]
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @classmethod
    def fresh(cls, config: RunConfig) -> "TrainState":
        net = CourtNet.initialize(config)
        optim = {k: AdamState.for_params(p, config.train.adam) for k, p in net.networks().items()}
        # shuffling stream is independent of the initialization streams
        rng = np.random.default_rng([config.train.seed, 1])
        return cls(net=net, optim=optim, rng=rng)

    @property
    def config(self) -> RunConfig:
        return self.net.config


@dataclass
class EpochStats:
    epoch: int
    loss_p: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    loss_j: list[float] = field(default_factory=list)
    soft_pr: list[float] = field(default_factory=list)
    soft_re: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    optimizer_steps: dict[str, int] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        def avg(v):
            return float(np.mean(v)) if v else float("nan")

        return {
            "epoch": self.epoch,
            "loss_P": avg(self.loss_p),
            "loss_D": avg(self.loss_d),
            "loss_J": avg(self.loss_j),
            "soft_pr": avg(self.soft_pr),
            "soft_re": avg(self.soft_re),
            "lr": self.lr[-1] if self.lr else float("nan"),
        }


def _finite(value: Tensor, what: str) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise NumericalError(f"{what} became {v}")
    return v


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray, stats: EpochStats) -> None:
    """Jury update, then prosecution, then defendant, each with the others frozen."""
    net, cfg = state.net, state.config
    loss_cfg = cfg.train.loss
    lr = lr_at(state.step, cfg.train.schedule)
    x_t, y_t = Tensor(x), Tensor(y)
    B = x.shape[0]

    for p in net.networks().values():
        p.zero_grad()
    y_p = net.prosecute(x_t)
    y_d = net.defend(x_t)

    if not cfg.train.no_jury:
        # (1) jury: ground truth is labelled 1, detached network outputs 0
        z = net.judge_logit(
            concat([x_t, x_t, x_t], axis=0),
            concat([y_t, y_p.detach(), y_d.detach()], axis=0),
        )
        loss_j = (
            losses.jury_loss(None, 1, logit=z[:B])
            + losses.jury_loss(None, 0, logit=z[B:2 * B])
            + losses.jury_loss(None, 0, logit=z[2 * B:])
        )
        stats.loss_j.append(_finite(loss_j, "jury loss"))
        loss_j.backward()
        adam_step(net.jury, state.optim["jury"], lr)
        net.jury.zero_grad()

    # (2) prosecution and (3) defendant against the updated, frozen jury
    for kind, y_out, store in (("prosecution", y_p, stats.loss_p), ("defendant", y_d, stats.loss_d)):
        params = net.prosecution if kind == "prosecution" else net.defendant
        if cfg.train.no_jury:
            loss = loss_cfg.abl_weight * losses.balance_term(y_out, y_t, loss_cfg)
        else:
            with frozen(net.jury):
                z = net.judge_logit(x_t, y_out)
                fn = losses.prosecution_loss if kind == "prosecution" else losses.defendant_loss
                loss = fn(y_out, y_t, None, loss_cfg, c_logit=z)
        store.append(_finite(loss, f"{kind} loss"))
        loss.backward()
        adam_step(params, state.optim[kind], lr)

    with no_grad():
        axes = losses.IMAGE_AXES
        stats.soft_pr.append(float(losses.soft_pr(y_p.detach(), y_t, loss_cfg.epsilon, axes).data.mean()))
        stats.soft_re.append(float(losses.soft_re(y_p.detach(), y_t, loss_cfg.epsilon, axes).data.mean()))
    stats.lr.append(lr)
    state.step += 1


def train_epoch(state: TrainState, dataset: Sequence[Sample]) -> EpochStats:
    if not dataset:
        raise ValueError("training set is empty")
    batch = state.config.train.batch_size
    order = state.rng.permutation(len(dataset))
    stats = EpochStats(epoch=state.epoch + 1)
    before = {k: s.step for k, s in state.optim.items()}
    for start in range(0, len(order), batch):
        x, y = stack_batch([dataset[i] for i in order[start:start + batch]])
        train_step(state, x, y, stats)
    state.epoch += 1
    stats.optimizer_steps = {k: s.step - before[k] for k, s in state.optim.items()}
    return stats


def evaluate(
    net: CourtNet,
    dataset: Sequence[Sample],
    threshold: float | None = None,
    batch_size: int = 32,
    aggregate: str = "per_image",
) -> losses.MetricsReport:
    """Detect on every sample and score the masks against ground truth."""
    threshold = net.config.threshold if threshold is None else threshold
    preds = []
    for start in range(0, len(dataset), batch_size):
        x, _ = stack_batch(dataset[start:start + batch_size])
        preds.extend(net.detect(x, threshold)[:, 0])
    ids = [s.metadata.get("image_path", str(i)) for i, s in enumerate(dataset)]
    return losses.dataset_metrics(
        zip(preds, (s.mask for s in dataset)), threshold=threshold, image_ids=ids, aggregate=aggregate
    )


def append_log(path: str | Path, stats: EpochStats) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        row = stats.means()
        w.writerow([row["epoch"]] + [repr(row[c]) for c in LOG_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def _tensor_table(state: TrainState) -> list[tuple[str, np.ndarray]]:
    table = []
    for kind, params in state.net.networks().items():
        for name, t in params.items():
            table.append((f"{kind}/{name}", t.data))
    for kind, opt in state.optim.items():
        for name in opt.m:
            table.append((f"opt/{kind}/m/{name}", opt.m[name]))
            table.append((f"opt/{kind}/v/{name}", opt.v[name]))
    return table


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    meta = {
        "config": state.config.to_mapping(),
        "epoch": state.epoch,
        "step": state.step,
        "optim_steps": {k: s.step for k, s in state.optim.items()},
        "rng": state.rng.bit_generator.state,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    table = _tensor_table(state)
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild the full training state; nothing is returned unless the file validates."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = RunConfig.from_mapping(meta["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes")

    state = TrainState.fresh(config)
    expected = _tensor_table(state)
    if [n for n, _ in expected] != list(tensors):
        raise CheckpointError(f"{path}: tensor table does not match the configured networks")
    for name, arr in expected:
        if arr.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {tensors[name].shape} vs {arr.shape}")
    for name, arr in expected:
        arr[...] = tensors[name]
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    for kind, steps in meta["optim_steps"].items():
        state.optim[kind].step = int(steps)
    state.rng.bit_generator.state = meta["rng"]
    return state


def fit(
    state: TrainState,
    dataset: Sequence[Sample],
    epochs: int,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    callback=None,
) -> list[EpochStats]:
    """Train until ``state.epoch == epochs``, logging and checkpointing each epoch."""
    history = []
    while state.epoch < epochs:
        stats = train_epoch(state, dataset)
        history.append(stats)
        if log_path is not None:
            append_log(log_path, stats)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
        if callback is not None:
            callback(state, stats)
    return history
