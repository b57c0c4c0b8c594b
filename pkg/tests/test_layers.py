import math

import numpy as np
import pytest

from spartan import tensor as T
from spartan.layers import (BuildConfig, CompositeActivation, ConvFilterLayer,
                            OffsetFilterLayer, PixelRange, build_network,
                            composite_activation, composite_backward,
                            entropy_bias_penalty, filter_activation_report,
                            heaviside, l1_activation_penalty, thermometer_encode)
from spartan.tensor import Rng, Tape, Tensor, construct


def phi(u, sigma=1.0):
    return math.exp(-(u * u) / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))


class TestHeaviside:
    def test_boundary_is_inclusive(self):
        assert heaviside(0.0) == 1.0

    def test_below(self):
        assert heaviside(-1e-9) == 0.0

    def test_above(self):
        assert heaviside(3.2) == 1.0

    def test_array(self):
        out = heaviside(np.array([-2.0, 0.0, 5.0]))
        assert out.tolist() == [0.0, 1.0, 1.0]


class TestCompositeBackward:
    def test_hsid_is_one(self):
        assert composite_backward("hsid", 12.3) == 1.0

    def test_hsat_at_zero(self):
        assert composite_backward("hsat", 0.0) == 1.0

    def test_cos_hsat_at_zero(self):
        assert composite_backward("cos_hsat", 0.0) == 0.0

    def test_cos_hsnd_at_half_pi(self):
        # -sin(pi/2) * phi(cos(pi/2)) = -phi(0) = -0.3989423
        val = composite_backward("cos_hsnd", math.pi / 2)
        assert val == pytest.approx(-0.3989423, abs=1e-7)

    def test_hsnd_is_normal_density(self):
        assert composite_backward("hsnd", 0.0) == pytest.approx(phi(0.0), abs=1e-12)

    @pytest.mark.parametrize("kind", ["hsid", "hsat", "hsnd", "cos_hsat", "cos_hsnd"])
    def test_matches_closed_form_on_grid(self, kind):
        xs = np.linspace(-8, 8, 10_000)
        got = composite_backward(kind, xs)
        closed = {
            "hsid": lambda v: 1.0,
            "hsat": lambda v: 1 / (1 + v * v),
            "hsnd": lambda v: phi(v),
            "cos_hsat": lambda v: -math.sin(v) / (1 + math.cos(v) ** 2),
            "cos_hsnd": lambda v: -math.sin(v) * phi(math.cos(v)),
        }[kind]
        expected = np.array([closed(v) for v in xs])
        assert np.abs(got - expected).max() <= 1e-12

    def test_small_sigma_stays_finite(self):
        xs = np.linspace(-8, 8, 5000)
        vals = composite_backward("cos_hsnd", xs, sigma=0.05)
        assert np.isfinite(vals).all()
        # spikes concentrate where cos(x) crosses 0
        peaks = xs[np.abs(vals) > 7.0]
        assert peaks.size > 0
        assert (np.abs(np.abs(np.cos(peaks))) < 0.1).all()

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            CompositeActivation("relu6")


class TestCompositeNode:
    def test_hsat_forward(self):
        act = CompositeActivation("hsat")
        out = composite_activation(construct([3], data=[-2, 0, 5]), act)
        assert out.data.tolist() == [0.0, 1.0, 1.0]

    def test_cos_forward_at_pi(self):
        act = CompositeActivation("cos_hsat")
        out = composite_activation(construct([1], data=[math.pi]), act)
        assert out.data.tolist() == [0.0]

    def test_backward_uses_synthetic_rule(self):
        act = CompositeActivation("hsat")
        x = Tensor(np.array([1.0], dtype=np.float64))
        with Tape() as tape:
            y = composite_activation(x, act)
            out = T.scale(T.sum_all(y), 2.0)  # upstream gradient of 2
            (gx,) = tape.backward(out, inputs=[x])
        assert gx.tolist() == [pytest.approx(2.0 / (1.0 + 1.0))]

    def test_binarity_fuzz(self):
        rng = Rng(0)
        xs = rng.uniform(-1e6, 1e6, (1_000_000,), np.float32)
        for kind in ("hsat", "cos_hsnd"):
            act = CompositeActivation(kind)
            out = act.forward_values(xs)
            assert ((out == 0.0) | (out == 1.0)).all()
            assert np.isfinite(act.backward_values(xs)).all()


class TestThermometer:
    def test_encode_42(self):
        assert thermometer_encode(42, (80, 60, 40, 20)) == (0, 0, 1, 1)

    def test_encode_77(self):
        assert thermometer_encode(77, (80, 60, 40, 20)) == (0, 1, 1, 1)

    def test_below_all(self):
        assert thermometer_encode(5, (80, 60, 40, 20)) == (0, 0, 0, 0)

    def test_rejects_unordered(self):
        with pytest.raises(ValueError, match="descending"):
            thermometer_encode(42, (20, 40, 60))


class TestConvFilterLayer:
    def test_threshold_at_half(self):
        layer = ConvFilterLayer("f", 1, 1, CompositeActivation("hsat"))
        layer.w.value.data[...] = 1.0
        layer.b.value.data[...] = -0.5
        x = construct([1, 1, 1, 3], data=[0.2, 0.5, 0.9])
        out = layer.forward(x)
        assert out.data.reshape(-1).tolist() == [0.0, 1.0, 1.0]

    def test_four_thresholds_thermometer(self):
        layer = ConvFilterLayer("f", 1, 4, CompositeActivation("hsat"))
        # default init: w = 1, cutoffs at 0.2, 0.4, 0.6, 0.8
        x = construct([1, 1, 1, 1], data=[0.42])
        out = layer.forward(x).data.reshape(-1)
        assert out.tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_threshold_identity_positive_weight(self):
        rng = Rng(1)
        layer = ConvFilterLayer("f", 1, 1, CompositeActivation("hsid"))
        w, b = 1.7, -0.93
        layer.w.value.data[...] = w
        layer.b.value.data[...] = b
        xs = rng.uniform(-2, 2, (1, 1, 1, 257), np.float32)
        out = layer.forward(Tensor(xs)).data.reshape(-1)
        expected = (xs.reshape(-1) >= -b / w).astype(np.float32)
        assert (out == expected).all()

    def test_threshold_identity_negative_weight(self):
        layer = ConvFilterLayer("f", 1, 1, CompositeActivation("hsid"))
        w, b = -1.3, 0.65
        layer.w.value.data[...] = w
        layer.b.value.data[...] = b
        xs = Rng(2).uniform(-2, 2, (1, 1, 1, 257), np.float32)
        out = layer.forward(Tensor(xs)).data.reshape(-1)
        expected = (xs.reshape(-1) <= -b / w).astype(np.float32)
        assert (out == expected).all()

    def test_monotone_encoding_with_positive_weights(self):
        # channels ordered by ascending cutoff form a thermometer: the ones
        # are a prefix on every input
        rng = Rng(3)
        layer = ConvFilterLayer("f", 1, 4, CompositeActivation("hsat"))
        layer.w.value.data[...] = rng.uniform(0.5, 2.0, (4, 1, 1, 1), np.float32)
        layer.b.value.data[...] = rng.uniform(-1.0, 0.0, (4,), np.float32)
        order = np.argsort(layer.cutoffs())
        x = Tensor(rng.uniform(-0.5, 1.5, (8, 1, 5, 5), np.float32))
        out = layer.forward(x).data[:, order]  # sort channels by cutoff
        flat = out.transpose(0, 2, 3, 1).reshape(-1, 4)
        diffs = np.diff(flat, axis=1)
        assert (diffs <= 0).all()  # once a bit drops to 0 it stays 0


class TestOffsetFilterLayer:
    def make(self, h=2, w=2, stats=None):
        stats = stats or PixelRange.full_range(h * w)
        return OffsetFilterLayer("f", h, w, CompositeActivation("hsat"), stats)

    def test_zero_thresholds_pass_nonnegative(self):
        layer = self.make()
        layer.thresholds.value.data[...] = 0.0
        x = construct([1, 1, 2, 2], data=[0.0, 0.3, 0.7, 1.0])
        assert (layer.forward(x).data == 1.0).all()

    def test_unreachable_thresholds_block_everything(self):
        layer = self.make()
        layer.thresholds.value.data[...] = 2.0  # above max input + 1
        x = construct([1, 1, 2, 2], data=[0.0, 0.3, 0.7, 1.0])
        assert (layer.forward(x).data == 0.0).all()

    def test_boundary_inclusive(self):
        layer = self.make(1, 1)
        layer.thresholds.value.data[...] = 0.6
        x = construct([1, 1, 1, 1], data=[0.6])
        assert layer.forward(x).data.reshape(()) == 1.0

    def test_only_thresholds_train(self):
        layer = self.make()
        assert [p.name for p in layer.parameters()] == ["f.thresholds"]
        x = construct([2, 1, 2, 2], fill=0.5)
        with Tape() as tape:
            out = layer.forward(x)
            tape.backward(T.sum_all(out))
        assert np.any(layer.thresholds.grad.data != 0)

    def test_threshold_gradient_sign(self):
        # raising a threshold lowers the pre-activation, so dt = -sum(gz)
        layer = self.make(1, 1)
        layer.thresholds.value.data[...] = 0.4
        x = construct([1, 1, 1, 1], data=[0.5])
        with Tape() as tape:
            out = layer.forward(x)
            tape.backward(T.sum_all(out))
        z = 0.5 - 0.4
        assert layer.thresholds.grad.data[0] == pytest.approx(-1.0 / (1.0 + z * z), rel=1e-5)


class TestPenalties:
    def test_l1_zero(self):
        assert l1_activation_penalty(construct([4])).item() == 0.0

    def test_l1_counts_ones(self):
        t = construct([7], data=[0, 1, 1, 0, 1, 1, 1])
        assert l1_activation_penalty(t).item() == 5.0

    def test_l1_small_vector(self):
        assert l1_activation_penalty(construct([5], data=[0, 1, 1, 0, 1])).item() == 3.0

    def test_l1_popcount_property(self):
        rng = Rng(4)
        bits = (rng.uniform(0, 1, (1000,), np.float32) > 0.5).astype(np.float32)
        assert l1_activation_penalty(Tensor(bits)).item() == bits.sum()

    def test_entropy_max_at_half(self):
        n = 5
        stats = PixelRange.full_range(n)
        t = construct([n], fill=0.5)
        pen = entropy_bias_penalty(t, stats, "binary_entropy")
        assert pen.item() == pytest.approx(n * math.log(2), rel=1e-6)

    def test_entropy_zero_at_edges(self):
        stats = PixelRange.full_range(4)
        lo = entropy_bias_penalty(construct([4], fill=0.0), stats).item()
        hi = entropy_bias_penalty(construct([4], fill=1.0), stats).item()
        assert lo == pytest.approx(0.0, abs=1e-4)
        assert hi == pytest.approx(0.0, abs=1e-4)

    def test_entropy_symmetry(self):
        stats = PixelRange.full_range(1)
        for b in (0.1, 0.25, 0.4):
            p1 = entropy_bias_penalty(construct([1], fill=b), stats).item()
            p2 = entropy_bias_penalty(construct([1], fill=1 - b), stats).item()
            assert p1 == pytest.approx(p2, rel=1e-5)

    def test_entropy_strictly_maximal_at_half(self):
        stats = PixelRange.full_range(1)
        mid = entropy_bias_penalty(construct([1], fill=0.5), stats).item()
        for b in (0.3, 0.45, 0.55, 0.7):
            assert entropy_bias_penalty(construct([1], fill=b), stats).item() < mid

    def test_plogp_mode(self):
        stats = PixelRange.full_range(1)
        pen = entropy_bias_penalty(construct([1], fill=0.5), stats, "plogp")
        assert pen.item() == pytest.approx(0.5 * math.log(0.5), rel=1e-6)

    def test_degenerate_positions_contribute_zero(self):
        stats = PixelRange(np.array([0.0, 0.3]), np.array([1.0, 0.3]))
        t = construct([2], data=[0.5, 0.3])
        pen = entropy_bias_penalty(t, stats)
        assert pen.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_entropy_gradient_matches_finite_differences(self):
        stats = PixelRange(np.array([0.0, 0.2, -1.0]), np.array([1.0, 0.8, 3.0]))
        t = Tensor(np.array([0.3, 0.5, 1.2], dtype=np.float64))
        err = T.grad_check(lambda v: entropy_bias_penalty(v, stats), t)
        assert err < 1e-4


class TestBuildNetwork:
    def test_standard_shapes_and_count(self):
        net = build_network("standard")
        x = Rng(5).uniform(0, 1, (3, 1, 28, 28), np.float32)
        logits, penalties = net.forward(x)
        assert logits.shape == (3, 10)
        assert penalties == []
        # 32*(1*9+1) + 32*(32*9+1)*3 + (512*50+50) + (50*10+10)
        assert sum(p.value.size for p in net.parameters()) == 54224

    def test_candidate_c_layers(self):
        net = build_network("c")
        first = net.layers[0]
        assert isinstance(first, ConvFilterLayer)
        assert first.act.kind == "cos_hsat"
        assert first.filters == 4
        _, penalties = net.forward(Rng(6).uniform(0, 1, (2, 1, 28, 28), np.float32))
        assert len(penalties) == 1  # single L1 stream from the filter layer

    def test_candidate_a_layers(self):
        net = build_network("a")
        first = net.layers[0]
        assert isinstance(first, OffsetFilterLayer)
        assert first.act.kind == "hsat"
        _, penalties = net.forward(Rng(7).uniform(0, 1, (2, 1, 28, 28), np.float32))
        assert len(penalties) == 1  # entropy stream

    def test_candidate_b_layers(self):
        net = build_network("b")
        first = net.layers[0]
        assert isinstance(first, ConvFilterLayer)
        assert first.act.kind == "hsnd"
        composite_convs = [l for l in net.layers
                           if getattr(l, "is_filtering", False)]
        assert len(composite_convs) == 2
        assert all(l.activation.kind == "cos_hsnd" for l in composite_convs)
        _, penalties = net.forward(Rng(8).uniform(0, 1, (2, 1, 28, 28), np.float32))
        assert len(penalties) == 3  # filter layer 1 plus the two composite convs

    def test_intermediate_shapes_28(self):
        # 28 -> 26 -> 24 -> 12 -> 10 -> 8 -> 4; flatten 32*4*4 = 512
        net = build_network("standard")
        x = Tensor(Rng(9).uniform(0, 1, (1, 1, 28, 28), np.float32))
        shapes = []
        for layer in net.layers:
            x = layer.forward(x)
            shapes.append(x.shape)
        assert shapes == [
            (1, 32, 26, 26), (1, 32, 24, 24), (1, 32, 12, 12),
            (1, 32, 10, 10), (1, 32, 8, 8), (1, 32, 4, 4),
            (1, 512), (1, 50), (1, 10),
        ]

    def test_unknown_candidate(self):
        with pytest.raises(ValueError, match="unknown candidate"):
            build_network("d")

    def test_binary_filter_outputs(self):
        for candidate in ("a", "b", "c"):
            net = build_network(candidate, BuildConfig(input_hw=(16, 16)))
            x = Tensor(Rng(10).uniform(0, 1, (2, 1, 16, 16), np.float32))
            out = net.layers[0].forward(x)
            assert ((out.data == 0.0) | (out.data == 1.0)).all()

    def test_prediction_invariant_to_evaluation_batching(self):
        net = build_network("c", BuildConfig(input_hw=(16, 16), seed=20))
        images = Rng(21).uniform(0, 1, (33, 1, 16, 16), np.float32)
        full = net.predict(images, batch_size=33)
        for bs in (1, 4, 32):
            assert (net.predict(images, batch_size=bs) == full).all()


class TestFilterReport:
    def test_dead_filter_flagged(self):
        # plain step forward: bias below -(max input) can never fire
        net = build_network("b", BuildConfig(input_hw=(16, 16)))
        layer = net.layers[0]
        layer.w.value.data[...] = 1.0
        layer.b.value.data[:] = np.array([-0.2, -0.4, -0.6, -2.0], dtype=np.float32)
        images = Rng(11).uniform(0, 1, (20, 1, 16, 16), np.float32)
        rows = filter_activation_report(net, images)
        assert len(rows) == 4
        assert rows[3].dead and rows[3].rate == 0.0
        assert not rows[0].dead
        assert rows[1].cutoff == pytest.approx(0.4, rel=1e-5)

    def test_always_on_filter(self):
        net = build_network("b", BuildConfig(input_hw=(16, 16)))
        layer = net.layers[0]
        layer.w.value.data[...] = 1.0
        layer.b.value.data[...] = 0.0  # fires on any non-negative input
        images = Rng(12).uniform(0, 1, (10, 1, 16, 16), np.float32)
        rows = filter_activation_report(net, images)
        assert all(r.rate == 1.0 for r in rows)

    def test_standard_has_no_filters(self):
        net = build_network("standard", BuildConfig(input_hw=(16, 16)))
        with pytest.raises(ValueError, match="no convolution-filter"):
            filter_activation_report(net, Rng(13).uniform(0, 1, (4, 1, 16, 16), np.float32))
