import numpy as np
import pytest

from camkit import backends as B
from camkit import zoo
from camkit.errors import ClassSpecError, LayerCapabilityError
from camkit.graph import INPUT, ModelGraph, backward_from_output, forward_recorded
from oracles import alpha_scalar_loop


def identity_head(weights_fc, shape=(2, 3, 3)):
    """1x1 identity conv (so the input map is a named layer) -> gap -> linear."""
    c = shape[0]
    dims = len(shape) - 1
    nodes = [
        zoo.conv("feat", c, c, dims, kernel=1, padding=0),
        zoo.node("gap", "gap", ["feat"]),
        zoo.node("fc", "linear", ["gap"], in_features=c, out_features=len(weights_fc)),
    ]
    eye = np.eye(c).reshape((c, c) + (1,) * dims)
    return ModelGraph(shape, nodes, {
        "feat": (eye, np.zeros(c)),
        "fc": (np.asarray(weights_fc, dtype=np.float32), np.zeros(len(weights_fc))),
    })


def explicit(c, scope="all_positions"):
    return B.ClassSpec("explicit", c, scope)


class TestIsolateClass:
    def test_argmax(self):
        np.testing.assert_array_equal(B.isolate_class(np.array([1.2, 3.4, 0.5]), B.ClassSpec()), [0, 1, 0])

    def test_predicted_positions(self):
        logits = np.zeros((2, 2, 2))
        logits[1] = 1.0
        seed = B.isolate_class(logits, explicit(1, "predicted_positions"), "segmentation")
        assert np.all(seed[1] == 1) and not seed[0].any()

    def test_predicted_nowhere(self):
        logits = np.zeros((2, 2, 2))
        logits[1] = 1.0
        seed = B.isolate_class(logits, explicit(0, "predicted_positions"), "segmentation")
        assert not seed.any()

    def test_all_positions(self):
        seed = B.isolate_class(np.zeros((3, 2, 2)), explicit(2), "segmentation")
        assert np.all(seed[2] == 1) and not seed[:2].any()

    def test_out_of_range(self):
        with pytest.raises(ClassSpecError):
            B.isolate_class(np.zeros(3), explicit(3))

    def test_parse(self):
        assert B.ClassSpec.parse("auto").mode == "argmax"
        spec = B.ClassSpec.parse("2", "predicted")
        assert spec.class_id == 2 and spec.segmentation_scope == "predicted_positions"
        with pytest.raises(ClassSpecError):
            B.ClassSpec.parse("two")


class TestNormalize:
    def test_range(self):
        np.testing.assert_allclose(B.normalize_map([0.0, 5.0, 10.0]), [0, 0.5, 1])

    def test_constant(self):
        assert not B.normalize_map([3.0, 3.0, 3.0]).any()

    def test_signed(self):
        np.testing.assert_allclose(B.normalize_map([-2.0, 0.0, 2.0]), [0, 0.5, 1])


class TestGradCam:
    def test_selects_channel_zero(self, rng):
        a = rng.normal(size=(2, 3, 3)).astype(np.float32)
        model = identity_head([[1.0, 0.0], [0.0, 1.0]])
        amap = B.grad_cam(model, a, explicit(0), "feat")
        expected = np.maximum(a[0].astype(np.float64) / 9, 0)
        np.testing.assert_allclose(amap.raw[0], expected, rtol=1e-6, atol=1e-9)
        pos = np.where(a[0] > 0, a[0], 0)
        assert np.argmax(amap.values) == np.argmax(pos)

    def test_zero_row_gives_zero_map(self, rng):
        model = identity_head([[0.0, 0.0], [0.0, 1.0]])
        amap = B.grad_cam(model, rng.normal(size=(2, 3, 3)), explicit(0), "feat")
        assert not amap.values.any()

    def test_constant_activation(self):
        model = identity_head([[1.0, 1.0]])
        amap = B.grad_cam(model, np.full((2, 3, 3), 2.0, dtype=np.float32), explicit(0), "feat")
        assert np.all(amap.raw > 0)
        assert not amap.values.any()

    def test_non_capable_layer(self, rng):
        model = identity_head([[1.0, 0.0]])
        with pytest.raises(LayerCapabilityError):
            B.grad_cam(model, rng.normal(size=(2, 3, 3)), explicit(0), "gap")

    def test_class_out_of_range(self, rng):
        with pytest.raises(ClassSpecError):
            B.grad_cam(identity_head([[1.0, 0.0]]), rng.normal(size=(2, 3, 3)), explicit(5))

    def test_upsampled_to_input(self, rng):
        nodes = [
            zoo.conv("c", 1, 2, 2, kernel=3, stride=2, padding=0),
            zoo.node("r", "relu", ["c"]),
            zoo.node("gap", "gap", ["r"]),
            zoo.node("fc", "linear", ["gap"], in_features=2, out_features=2),
        ]
        model = ModelGraph((1, 9, 9), nodes, {
            "c": (rng.normal(size=(2, 1, 3, 3)), np.zeros(2)),
            "fc": (rng.normal(size=(2, 2)), np.zeros(2)),
        })
        amap = B.grad_cam(model, rng.normal(size=(1, 9, 9)), B.ClassSpec(), "r")
        assert amap.raw.shape == (1, 4, 4)
        assert amap.values.shape == (1, 9, 9)


class TestGuidedBackprop:
    def test_fully_gated(self):
        nodes = [
            zoo.conv("c", 1, 1, 2, kernel=1, padding=0),
            zoo.node("r", "relu", ["c"]),
            zoo.node("gap", "gap", ["r"]),
            zoo.node("fc", "linear", ["gap"], in_features=1, out_features=1),
        ]
        model = ModelGraph((1, 3, 3), nodes, {"c": (-np.ones((1, 1, 1, 1)), np.zeros(1)),
                                              "fc": (np.ones((1, 1)), np.zeros(1))})
        assert not B.guided_backprop(model, np.ones((1, 3, 3)), explicit(0)).values.any()

    def test_constant_gradient(self):
        nodes = [
            zoo.conv("c", 1, 1, 2, kernel=1, padding=0),
            zoo.node("r", "relu", ["c"]),
            zoo.node("gap", "gap", ["r"]),
            zoo.node("fc", "linear", ["gap"], in_features=1, out_features=1),
        ]
        model = ModelGraph((1, 3, 3), nodes, {"c": (np.ones((1, 1, 1, 1)), np.zeros(1)),
                                              "fc": (np.ones((1, 1)), np.zeros(1))})
        amap = B.guided_backprop(model, np.linspace(0.1, 1, 9).reshape(1, 3, 3), explicit(0))
        np.testing.assert_allclose(amap.raw, 1 / 9, rtol=1e-6)
        assert not amap.values.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gating_only_removes_signal(self, seed):
        rng = np.random.default_rng(seed)
        model = zoo.random_model(rng, 2, skip=False)
        x = rng.normal(size=model.input_shape).astype(np.float32)
        cache = forward_recorded(model, x)
        s = B.isolate_class(cache.logits, B.ClassSpec(), model.task)
        standard = backward_from_output(model, cache, s, INPUT, "standard")
        amap = B.guided_backprop(model, class_spec=B.ClassSpec(), cache=cache)
        zero_std = np.all(standard == 0, axis=0)
        assert not amap.raw[0][zero_std].any()

    def test_multi_channel_reduction(self):
        model = identity_head([[1.0, -3.0]], shape=(2, 2, 2))
        amap = B.guided_backprop(model, np.ones((2, 2, 2)), explicit(0))
        # no ReLU on the path: gradients are 1/4 and -3/4, the larger magnitude wins
        np.testing.assert_allclose(amap.raw, 0.75)


class TestGuidedGradCam:
    def test_combine_hand_product(self):
        out = B.combine([[1.0, 0.0], [0.5, 1.0]], [[0.2, 0.9], [0.4, 1.0]])
        np.testing.assert_allclose(out, [[0.2, 0.0], [0.2, 1.0]])

    def test_identity_factor(self, rng):
        g = rng.random((1, 4, 4))
        np.testing.assert_array_equal(B.combine(g, np.ones_like(g)), g)

    def test_zero_cam_absorbs(self, rng):
        model = identity_head([[0.0, 0.0], [1.0, 1.0]])
        amap = B.guided_grad_cam(model, rng.normal(size=(2, 3, 3)), explicit(0), "feat")
        assert not amap.values.any()

    @pytest.mark.parametrize("seed", range(4))
    def test_support_within_both(self, seed):
        rng = np.random.default_rng(seed)
        model = zoo.random_model(rng, 2 + seed % 2, skip=seed > 1)
        x = rng.normal(size=model.input_shape).astype(np.float32)
        cache = forward_recorded(model, x)
        gg = B.guided_grad_cam(model, class_spec=B.ClassSpec(), cache=cache)
        gc = B.grad_cam(model, class_spec=B.ClassSpec(), cache=cache)
        gb = B.guided_backprop(model, class_spec=B.ClassSpec(), cache=cache)
        assert not gg.values[(gc.values == 0) | (gb.values == 0)].any()


class TestGradCamPP:
    def test_zero_gradient(self, rng):
        model = identity_head([[0.0, 0.0], [1.0, 0.0]])
        amap = B.grad_cam_pp(model, rng.normal(size=(2, 3, 3)), explicit(0), "feat")
        assert not amap.raw.any() and not amap.values.any()

    def test_constant_case(self):
        c, a, s = 0.5, 2.0, 9
        g = np.full((1, 3, 3), c)
        act = np.full((1, 3, 3), a)
        alpha = B.gradcampp_alpha(g, act)
        np.testing.assert_allclose(alpha, c ** 2 / (2 * c ** 2 + s * a * c ** 3))
        assert not B.normalize_map(B.grad_cam_pp_raw(act, g)).any()

    def test_spike(self):
        g = np.zeros((2, 4, 4))
        g[0, 1, 2] = 0.7
        act = np.full((2, 4, 4), 0.3)
        act[0, 1, 2] = 1.5
        act[1] = 5.0
        raw = B.grad_cam_pp_raw(act, g)
        assert np.unravel_index(np.argmax(raw[0]), (4, 4)) == (1, 2)

    def test_alpha_matches_scalar_loop(self, rng):
        g = rng.normal(size=(3, 4, 5))
        a = rng.normal(size=(3, 4, 5))
        g[0, 0, 0] = 0.0
        np.testing.assert_allclose(B.gradcampp_alpha(g, a), alpha_scalar_loop(g, a), rtol=1e-12, atol=0)

    def test_zero_denominator(self):
        # 2 g^2 + S g^3 = 0 when sum(A) = -2/g
        g = np.full((1, 2, 2), 0.5)
        a = np.full((1, 2, 2), -1.0)
        assert not B.gradcampp_alpha(g, a).any()


def _all_backends(model, x, spec, layer="auto"):
    cache = forward_recorded(model, x)
    return {b: B.generate(model, b, class_spec=spec, layer=layer, cache=cache) for b in B.BACKENDS}


class TestProperties:
    @pytest.mark.parametrize("dims", [2, 3])
    @pytest.mark.parametrize("task", ["classification", "segmentation"])
    def test_shapes_and_range(self, dims, task):
        rng = np.random.default_rng(dims)
        model = zoo.random_model(rng, dims, skip=True, task=task)
        x = rng.normal(size=model.input_shape).astype(np.float32)
        for name, amap in _all_backends(model, x, B.ClassSpec()).items():
            assert amap.values.shape == (1,) + model.input_shape[1:], name
            assert amap.values.min() >= 0 and amap.values.max() <= 1
            if name in ("gcam", "gcampp"):
                assert amap.raw.min() >= 0

    @pytest.mark.parametrize("dims", [2, 3])
    @pytest.mark.parametrize("backend", ["gcam", "gcampp"])
    def test_class_discrimination(self, dims, backend):
        size = 8 if dims == 2 else 6
        model = zoo.two_pathway(dims, size)
        x = zoo.two_pathway_input(dims, size)
        regions = zoo.pathway_regions(dims, size)
        for c in (0, 1):
            amap = B.generate(model, backend, x, explicit(c))
            peak = np.unravel_index(np.argmax(amap.values[0]), amap.values.shape[1:])
            assert regions[c][peak]

    @pytest.mark.parametrize("scale", [2.0, 0.25])
    @pytest.mark.parametrize("backend", ["gcam", "gbp", "ggcam"])
    def test_seed_scaling_invariance(self, scale, backend, monkeypatch):
        rng = np.random.default_rng(11)
        model = zoo.random_model(rng, 2, skip=True)
        x = rng.normal(size=model.input_shape).astype(np.float32)
        before = B.generate(model, backend, x, B.ClassSpec()).values
        original = B.isolate_class
        monkeypatch.setattr(B, "isolate_class", lambda *a, **k: original(*a, **k) * scale)
        after = B.generate(model, backend, x, B.ClassSpec()).values
        assert before.tobytes() == after.tobytes()

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        model = zoo.random_model(rng, 3, skip=True, task="segmentation")
        x = rng.normal(size=model.input_shape).astype(np.float32)
        first = _all_backends(model, x, B.ClassSpec())
        second = _all_backends(model, x, B.ClassSpec())
        for name in B.BACKENDS:
            assert first[name].values.tobytes() == second[name].values.tobytes()

    def test_predicted_scope_changes_seed_only(self):
        model = zoo.segmentation_demo()
        x = np.zeros((1, 8, 8), dtype=np.float32)
        x[0, 2:5, 2:5] = 1.0
        amap = B.grad_cam(model, x, explicit(1, "predicted_positions"))
        assert amap.values.shape == (1, 8, 8)
        assert amap.values.max() == 1.0
