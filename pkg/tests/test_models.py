import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from courtnet import tensor as T
from courtnet.config import RunConfig
from courtnet.models import CourtNet, fuse, fusion_weights
from courtnet.tensor import ShapeError, Tensor

SMALL = RunConfig().replace(pros_blocks=2, def_blocks=1)
unit = st.floats(0.0, 1.0, allow_nan=False)
positive = st.floats(1e-6, 1.0, allow_nan=False)


@pytest.fixture(scope="module")
def net():
    return CourtNet.initialize(SMALL, seed=0)


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).random((2, 1, 56, 56))


class TestNetworks:
    def test_prosecution_widths_and_output(self, net, batch):
        trace = []
        y = net.prosecute(batch, trace)
        assert y.shape == (2, 1, 56, 56)
        assert np.all((y.data > 0) & (y.data < 1))
        assert [rec["fine_input"].shape[-1] for rec in trace] == [32, 32]
        assert net.prosecution["deembed.proj.w"].shape == (64 + 32 * 2, 16)

    def test_defendant_output(self, net, batch):
        trace = []
        y = net.defend(batch, trace)
        assert y.shape == (2, 1, 56, 56)
        assert trace[0]["coarse"].shape == (2, 4, 196, 196)

    def test_jury_is_per_image_probability(self, net, batch):
        c = net.judge(batch, batch)
        assert c.shape == (2,)
        assert np.all((c.data > 0) & (c.data < 1))

    def test_jury_rejects_mismatch(self, net, batch):
        with pytest.raises(ShapeError):
            net.judge(batch, batch[:, :, :28, :28])

    def test_initialization_is_deterministic(self):
        a = CourtNet.initialize(SMALL, seed=5)
        b = CourtNet.initialize(SMALL, seed=5)
        for kind in ("prosecution", "defendant", "jury"):
            sa, sb = a.networks()[kind].snapshot(), b.networks()[kind].snapshot()
            assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_detect_is_binary(self, net, batch):
        m = net.detect(batch)
        assert m.shape == (2, 1, 56, 56)
        assert set(np.unique(m)) <= {0.0, 1.0}

    def test_no_jury_fuses_by_mean(self, batch):
        cfg = SMALL.replace(no_jury=True)
        net = CourtNet.initialize(cfg, seed=0)
        with T.no_grad():
            ref = 0.5 * net.prosecute(batch).data + 0.5 * net.defend(batch).data
        assert np.array_equal(net.fused(batch).data, ref)


class TestFusion:
    @settings(max_examples=300, deadline=None)
    @given(positive, positive)
    def test_weights_sum_to_one_exactly(self, cp, cd):
        w_p, w_d = fusion_weights(Tensor([cp]), Tensor([cd]))
        assert w_p.data[0] + w_d.data[0] == 1.0

    @settings(max_examples=200, deadline=None)
    @given(positive, st.integers(0, 2**31 - 1))
    def test_equal_confidence_is_mean(self, c, seed):
        rng = np.random.default_rng(seed)
        yp, yd = rng.random((1, 1, 4, 4)), rng.random((1, 1, 4, 4))
        out = fuse(Tensor(yp), Tensor(yd), Tensor([c]), Tensor([c])).data
        assert np.array_equal(out, (yp + yd) / 2)

    @settings(max_examples=200, deadline=None)
    @given(positive, positive, positive, st.integers(0, 2**31 - 1))
    def test_monotone_toward_prosecution(self, c1, c2, cd, seed):
        lo, hi = sorted((c1, c2))
        rng = np.random.default_rng(seed)
        yp, yd = rng.random((1, 1, 3, 3)), rng.random((1, 1, 3, 3))
        d_lo = np.abs(fuse(Tensor(yp), Tensor(yd), Tensor([lo]), Tensor([cd])).data - yp)
        d_hi = np.abs(fuse(Tensor(yp), Tensor(yd), Tensor([hi]), Tensor([cd])).data - yp)
        assert np.all(d_hi <= d_lo + 1e-15)

    def test_zero_confidences_fall_back_to_mean(self):
        w_p, w_d = fusion_weights(Tensor([0.0]), Tensor([0.0]))
        assert w_p.item() == 0.5 and w_d.item() == 0.5

    def test_one_sided(self):
        w_p, w_d = fusion_weights(Tensor([0.7]), Tensor([0.0]))
        assert w_p.item() == 1.0 and w_d.item() == 0.0

    def test_negative_confidence_rejected(self):
        with pytest.raises(ValueError):
            fusion_weights(Tensor([-0.1]), Tensor([0.5]))

    def test_gradient_flows_to_confidences(self):
        from courtnet.gradcheck import grad_check

        rng = np.random.default_rng(0)
        ins = [Tensor(rng.random((2, 1, 2, 2))), Tensor(rng.random((2, 1, 2, 2))),
               Tensor(rng.random(2) + 0.1), Tensor(rng.random(2) + 0.1)]
        assert grad_check(fuse, ins) < 1e-6


class TestSpecificCases:
    def test_zero_final_jury_layer_gives_half(self, batch):
        net = CourtNet.initialize(SMALL, seed=4)
        last = len(SMALL.jury.fc_hidden)
        net.jury[f"fc{last}.w"].data[:] = 0
        net.jury[f"fc{last}.b"].data[:] = 0
        c = net.judge(batch, batch)
        assert np.array_equal(c.data, [0.5, 0.5])

    def test_confidences_096_004(self):
        w_p, w_d = fusion_weights(Tensor([0.96]), Tensor([0.04]))
        assert w_p.item() == pytest.approx(0.96, abs=1e-15)
        assert w_d.item() == pytest.approx(0.04, abs=1e-15)

    def test_jury_feature_map_is_4x4(self, net, batch):
        h = T.concat([Tensor(batch), Tensor(batch)], axis=1)
        for i in range(len(SMALL.jury.conv_channels)):
            h = T.conv2d(h, net.jury[f"conv{i}.k"], net.jury[f"conv{i}.b"], stride=2, padding=1)
        assert h.shape[2:] == (4, 4)

    def test_zero_fused_map_gives_empty_mask(self, batch, monkeypatch):
        net = CourtNet.initialize(SMALL, seed=0)
        monkeypatch.setattr(CourtNet, "fused", lambda self, x: Tensor(np.zeros((2, 1, 56, 56))))
        mask = net.detect(batch)
        assert mask.shape == (2, 1, 56, 56) and not mask.any()
