import math

import numpy as np
import pytest

from courtnet.config import AdamConfig, RunConfig, Schedule
from courtnet.data import SceneSpec, generate_random_scenes, stack_batch
from courtnet.models import ModelParams
from courtnet.tensor import Tensor
from courtnet.training import (
    AdamState,
    CheckpointError,
    EpochStats,
    NumericalError,
    TrainState,
    adam_step,
    append_log,
    evaluate,
    fit,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_epoch,
    train_step,
)

TINY = RunConfig().replace(pros_blocks=1, def_blocks=1, batch_size=4, lr_max=1e-3, warmup_steps=2)


@pytest.fixture(scope="module")
def scenes():
    return generate_random_scenes(SceneSpec(seed=3), 8)


def scalar_params(value=0.0):
    p = ModelParams("jury")
    p["w"] = Tensor(np.array([value]), requires_grad=True)
    return p


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = scalar_params(1.5)
        p["w"].grad = np.zeros(1)
        st = AdamState.for_params(p)
        adam_step(p, st, 0.1)
        assert p["w"].item() == 1.5 and st.step == 1

    def test_first_step_is_minus_lr(self):
        p = scalar_params(0.0)
        p["w"].grad = np.ones(1)
        st = AdamState.for_params(p)
        adam_step(p, st, 1e-3)
        # m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        assert p["w"].item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_hand_recurrence_two_steps(self):
        p = scalar_params(0.0)
        st = AdamState.for_params(p, AdamConfig())
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        x, m, v = 0.0, 0.0, 0.0
        for t, g in enumerate([2.0, -1.0], start=1):
            p["w"].grad = np.array([g])
            adam_step(p, st, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"].item() == pytest.approx(x, rel=1e-12)

    def test_nan_names_parameter(self):
        p = scalar_params()
        p["w"].grad = np.array([np.nan])
        with pytest.raises(NumericalError, match="w"):
            adam_step(p, AdamState.for_params(p), 0.1)


class TestSchedule:
    def test_endpoints(self):
        s = Schedule()
        assert lr_at(0, s) == 1e-7
        assert lr_at(200, s) == 2.5e-5
        assert lr_at(1000, s) == 2.5e-5

    def test_midpoint(self):
        assert lr_at(100) == pytest.approx((1e-7 + 2.5e-5) / 2, rel=1e-12)

    def test_non_decreasing(self):
        vals = [lr_at(t) for t in range(0, 250)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestTrainStep:
    def test_one_batch_three_updates(self, scenes):
        st = TrainState.fresh(TINY)
        stats = train_epoch(st, scenes[:4])
        assert stats.optimizer_steps == {"prosecution": 1, "defendant": 1, "jury": 1}
        assert st.step == 1 and st.epoch == 1

    def test_no_jury_leaves_jury_untouched(self, scenes):
        st = TrainState.fresh(TINY.replace(no_jury=True))
        before = st.net.jury.snapshot()
        stats = train_epoch(st, scenes[:4])
        after = st.net.jury.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert stats.optimizer_steps["jury"] == 0

    def test_alternation_isolation(self, scenes, monkeypatch):
        """Each optimizer step touches only its own network."""
        import courtnet.training as tr

        st = TrainState.fresh(TINY)
        log = []
        real = tr.adam_step

        def spy(params, state, lr):
            snaps = {k: p.snapshot() for k, p in st.net.networks().items()}
            real(params, state, lr)
            changed = [
                k for k, p in st.net.networks().items()
                if any(not np.array_equal(snaps[k][n], v) for n, v in p.snapshot().items())
            ]
            log.append((params.kind, changed))

        monkeypatch.setattr(tr, "adam_step", spy)
        x, y = stack_batch(scenes[:4])
        train_step(st, x, y, EpochStats(1))
        assert [k for k, _ in log] == ["jury", "prosecution", "defendant"]
        for kind, changed in log:
            assert changed == [kind]

    def test_jury_loss_does_not_reach_generators(self, scenes, monkeypatch):
        import courtnet.training as tr

        st = TrainState.fresh(TINY)
        grads_seen = {}
        real = tr.adam_step

        def spy(params, state, lr):
            if params.kind == "jury":
                for kind in ("prosecution", "defendant"):
                    grads_seen[kind] = [t.grad for t in st.net.networks()[kind].values()]
            real(params, state, lr)

        monkeypatch.setattr(tr, "adam_step", spy)
        x, y = stack_batch(scenes[:4])
        train_step(st, x, y, EpochStats(1))
        for kind in ("prosecution", "defendant"):
            assert all(g is None for g in grads_seen[kind])

    def test_deterministic(self, scenes):
        a, b = TrainState.fresh(TINY), TrainState.fresh(TINY)
        sa = train_epoch(a, scenes)
        sb = train_epoch(b, scenes)
        assert sa.loss_p == sb.loss_p and sa.loss_j == sb.loss_j
        pa, pb = a.net.prosecution.snapshot(), b.net.prosecution.snapshot()
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)

    def test_nan_aborts(self, scenes):
        st = TrainState.fresh(TINY)
        st.net.prosecution["deembed.proj.b"].data[0] = np.nan
        with pytest.raises(NumericalError):
            train_epoch(st, scenes[:4])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_epoch(TrainState.fresh(TINY), [])

    def test_loss_decreases_on_easy_data(self):
        easy = SceneSpec(seed=8, background_low=0.1, background_high=0.1, blob_count=0, gradient_amp=0.0,
                         noise_sigma=0.0, amp_min=0.8, amp_max=0.9)
        data = generate_random_scenes(easy, 8)
        st = TrainState.fresh(TINY.replace(no_jury=True, lr_max=3e-3))
        hist = fit(st, data, 50)
        first = np.mean(hist[0].loss_p)
        last = np.mean([np.mean(h.loss_p) for h in hist[-5:]])
        assert last < first

    def test_evaluate_report(self, scenes):
        rep = evaluate(TrainState.fresh(TINY).net, scenes)
        assert len(rep) == 8
        assert all(0 <= f <= 1 for f in rep.f1)


class TestCheckpoint:
    def test_round_trip_bytes(self, scenes, tmp_path):
        st = TrainState.fresh(TINY)
        train_epoch(st, scenes[:4])
        save_checkpoint(tmp_path / "a.cnt", st)
        save_checkpoint(tmp_path / "b.cnt", load_checkpoint(tmp_path / "a.cnt"))
        assert (tmp_path / "a.cnt").read_bytes() == (tmp_path / "b.cnt").read_bytes()

    def test_parameters_bit_equal(self, scenes, tmp_path):
        st = TrainState.fresh(TINY)
        save_checkpoint(tmp_path / "a.cnt", st)
        back = load_checkpoint(tmp_path / "a.cnt")
        for kind, p in st.net.networks().items():
            q = back.net.networks()[kind]
            assert all(np.array_equal(p[k].data, q[k].data) for k in p)

    def test_resume_matches_unbroken(self, scenes, tmp_path):
        full = TrainState.fresh(TINY)
        fit(full, scenes, 3)
        part = TrainState.fresh(TINY)
        fit(part, scenes, 1, checkpoint_path=tmp_path / "c.cnt")
        resumed = load_checkpoint(tmp_path / "c.cnt")
        fit(resumed, scenes, 3)
        for kind, p in full.net.networks().items():
            q = resumed.net.networks()[kind]
            assert all(np.array_equal(p[k].data, q[k].data) for k in p)

    def test_magic(self, tmp_path):
        st = TrainState.fresh(TINY)
        save_checkpoint(tmp_path / "a.cnt", st)
        raw = bytearray((tmp_path / "a.cnt").read_bytes())
        raw[0:4] = b"XXXX"
        (tmp_path / "a.cnt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "a.cnt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "a.cnt", TrainState.fresh(TINY))
        raw = (tmp_path / "a.cnt").read_bytes()
        (tmp_path / "a.cnt").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "a.cnt")

    def test_unknown_version(self, tmp_path):
        save_checkpoint(tmp_path / "a.cnt", TrainState.fresh(TINY))
        raw = bytearray((tmp_path / "a.cnt").read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        (tmp_path / "a.cnt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "a.cnt")


def test_log_columns(scenes, tmp_path):
    st = TrainState.fresh(TINY)
    fit(st, scenes[:4], 2, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_P,loss_D,loss_J,soft_pr,soft_re,lr"
    assert len(lines) == 3 and lines[2].startswith("2,")
