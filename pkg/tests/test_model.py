import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ildet import boxes as box_ops
from ildet.data import Scene
from ildet.kernel import DimensionError, StateError
from ildet.model import (
    ClassSet,
    DetectorModel,
    FrozenSnapshot,
    ValidationError,
    extend_model,
    predict_detections,
    predict_many,
)


def _scene(boxes, features, sid=0):
    boxes = np.asarray(boxes, dtype=float)
    return Scene(sid, np.zeros(0, dtype=np.int64), np.zeros((0, 4)), boxes, np.asarray(features, float))


class TestClassSet:
    def test_columns(self):
        cs = ClassSet((3, 1), (7,))
        assert cs.all == (3, 1, 7)
        assert [cs.column(c) for c in cs.all] == [1, 2, 3]

    @pytest.mark.parametrize("old,new", [((1, 2), (2,)), ((0, 1), ()), ((1, 1), ())])
    def test_rejects_bad_ids(self, old, new):
        with pytest.raises(ValidationError):
            ClassSet(old, new)


class TestForward:
    def test_output_widths(self):
        m = DetectorModel(6, ClassSet((1, 2, 3, 4)))
        logits, deltas = m.forward(np.zeros((3, 6)))
        assert logits.shape == (3, 5) and deltas.shape == (3, 16)

    def test_zero_trunk_gives_bias(self, rng):
        m = DetectorModel(5, ClassSet((1, 2)), hidden=(4,))
        for k in ("trunk.0.W", "trunk.0.b"):
            m.store.params[k][...] = 0.0
        m.store.params["cls.b"][...] = [0.5, -1.0, 2.0]
        logits, _ = m.forward(rng.normal(size=(4, 5)))
        assert np.array_equal(logits, np.tile([0.5, -1.0, 2.0], (4, 1)))

    def test_empty_batch(self):
        logits, deltas = DetectorModel(5, ClassSet((1, 2))).forward(np.zeros((0, 5)))
        assert logits.shape == (0, 3) and deltas.shape == (0, 8)

    def test_layer_by_layer_oracle(self, rng):
        m = DetectorModel(4, ClassSet((1, 2)), hidden=(5, 3), seed=2)
        x = rng.normal(size=(3, 4))
        p = m.store.params
        h = x
        for i in range(2):
            h = np.maximum(0, h @ p[f"trunk.{i}.W"] + p[f"trunk.{i}.b"])
        logits, deltas = m.forward(x)
        np.testing.assert_allclose(logits, h @ p["cls.W"] + p["cls.b"], atol=1e-14)
        np.testing.assert_allclose(deltas, h @ p["bbox.W"] + p["bbox.b"], atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            DetectorModel(5, ClassSet((1,))).forward(np.zeros((2, 4)))

    def test_backward_needs_forward(self):
        m = DetectorModel(5, ClassSet((1,)))
        with pytest.raises(StateError):
            m.backward(np.zeros((1, 2)), np.zeros((1, 4)))

    def test_initial_head_scales(self):
        m = DetectorModel(36, ClassSet(tuple(range(1, 9))), seed=0)
        assert np.std(m.store["cls.W"]) == pytest.approx(0.01, rel=0.15)
        assert np.std(m.store["bbox.W"]) == pytest.approx(0.001, rel=0.15)
        assert np.std(m.store["trunk.0.W"]) == pytest.approx(np.sqrt(2 / 36), rel=0.15)
        assert not m.store["cls.b"].any()


class TestExtend:
    def test_empty_extension_is_identity(self):
        m = DetectorModel(5, ClassSet((1, 2)), seed=1)
        e = extend_model(m, ())
        for k in m.store.params:
            assert np.array_equal(m.store[k], e.store[k])

    def test_shape_bookkeeping(self, rng):
        m = DetectorModel(5, ClassSet((1, 2, 3, 4)), seed=1)
        e = extend_model(m, (5,), seed=9)
        x = rng.normal(size=(6, 5))
        (l0, d0), (l1, d1) = m.forward(x), e.forward(x)
        assert l1.shape == (6, 6) and d1.shape == (6, 20)
        assert np.array_equal(l0, l1[:, :5]) and np.array_equal(d0, d1[:, :16])
        assert e.class_set == ClassSet((1, 2, 3, 4), (5,))

    @given(st.integers(0, 10_000), st.lists(st.integers(3, 9), min_size=1, max_size=4, unique=True))
    def test_old_outputs_invariant(self, seed, added):
        r = np.random.default_rng(seed)
        m = DetectorModel(4, ClassSet((1, 2)), hidden=(6,), seed=seed)
        e = extend_model(m, added, seed=seed + 1)
        x = r.normal(size=(5, 4)) * 3
        (l0, d0), (l1, d1) = m.forward(x), e.forward(x)
        assert np.array_equal(l0, l1[:, :3]) and np.array_equal(d0, d1[:, :8])

    def test_duplicate_class_rejected(self):
        m = DetectorModel(5, ClassSet((1, 2)))
        with pytest.raises(ValidationError):
            extend_model(m, (2,))
        with pytest.raises(ValidationError):
            extend_model(m, (4, 4))


class TestFrozenSnapshot:
    def test_immune_to_source_training(self, rng):
        m = DetectorModel(5, ClassSet((1, 2)), seed=3)
        snap = FrozenSnapshot(m)
        x = rng.normal(size=(8, 5))
        before = snap.forward(x)
        for _ in range(100):
            m.forward(x)
            m.backward(rng.normal(size=(8, 3)), rng.normal(size=(8, 8)))
            for k, g in m.store.grads.items():
                m.store.params[k] -= 1e-3 * g
            m.store.zero_grad()
        after = snap.forward(x)
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_parameters_read_only(self):
        snap = FrozenSnapshot(DetectorModel(5, ClassSet((1,))))
        with pytest.raises(ValueError):
            snap.params["cls.W"][0, 0] = 1.0

    def test_cache_matches_fresh_pass(self, rng):
        m = DetectorModel(6, ClassSet((1, 2, 3)), seed=4)
        snap = FrozenSnapshot(m)
        scenes = [_scene(np.tile([0.1, 0.1, 0.5, 0.5], (250, 1)), rng.normal(size=(250, 6)), sid=i)
                  for i in range(4)]
        snap.precompute(scenes)
        for s in scenes:
            cached = snap.responses(s)
            fresh = snap.responses(s, use_cache=False)
            assert all(np.array_equal(a, b) for a, b in zip(cached, fresh))


class TestPredict:
    def test_background_model_detects_nothing(self, rng):
        m = DetectorModel(4, ClassSet((1, 2)), hidden=(3,))
        m.store.params["cls.b"][...] = [10.0, -10.0, -10.0]
        for k in ("cls.W",):
            m.store.params[k][...] = 0.0
        s = _scene(np.tile([0.2, 0.2, 0.6, 0.6], (5, 1)), rng.normal(size=(5, 4)))
        assert len(predict_detections(m, s)) == 0

    def test_single_confident_proposal(self):
        m = DetectorModel(4, ClassSet((1, 2, 3)), hidden=(3,))
        m.store.params["cls.W"][...] = 0.0
        m.store.params["bbox.W"][...] = 0.0
        p = np.log([0.1 / 3, 0.1 / 3, 0.1 / 3, 0.9])
        m.store.params["cls.b"][...] = p
        box = [0.1, 0.2, 0.4, 0.7]
        det = predict_detections(m, _scene([box], np.zeros((1, 4))))
        assert len(det) == 1 and det.classes[0] == 3
        np.testing.assert_allclose(det.boxes[0], box, atol=1e-15)
        assert det.scores[0] == pytest.approx(0.9)

    def test_overlapping_same_class_matches_oracle(self, rng):
        m = DetectorModel(4, ClassSet((1,)), hidden=(3,), seed=5)
        m.store.params["bbox.W"][...] = 0.0
        base = np.array([0.3, 0.3, 0.6, 0.6])
        boxes = base + rng.normal(0, 0.03, size=(5, 4))
        s = _scene(boxes, rng.normal(size=(5, 4)))
        logits, _ = m.forward(s.features)
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        det = predict_detections(m, s, score_threshold=0.0)
        order = sorted(range(5), key=lambda i: (-p[i, 1], i))
        kept = []
        for i in order:
            if all(box_ops.iou(boxes[i], boxes[j]) <= 0.3 for j in kept):
                kept.append(i)
        np.testing.assert_allclose(det.boxes, boxes[kept], atol=1e-15)

    @given(st.integers(0, 1000))
    def test_never_background_or_degenerate(self, seed):
        r = np.random.default_rng(seed)
        m = DetectorModel(4, ClassSet((2, 5)), hidden=(4,), seed=seed)
        m.store.params["bbox.W"] *= 2000  # wild deltas exercise clipping
        xy = r.uniform(0, 0.7, size=(20, 2))
        boxes = np.concatenate([xy, xy + r.uniform(0.05, 0.3, size=(20, 2))], axis=1)
        det = predict_detections(m, _scene(boxes, r.normal(size=(20, 4)) * 3), score_threshold=0.0)
        assert not np.any(det.classes == 0)
        assert np.all(det.boxes[:, 2] > det.boxes[:, 0]) and np.all(det.boxes[:, 3] > det.boxes[:, 1])

    def test_batched_prediction_matches_per_scene(self, rng):
        m = DetectorModel(4, ClassSet((1, 2)), hidden=(4,), seed=1)
        scenes = []
        for i in range(3):
            xy = rng.uniform(0, 0.5, size=(15, 2))
            scenes.append(_scene(np.concatenate([xy, xy + 0.3], 1), rng.normal(size=(15, 4)), i))
        for s, d in zip(scenes, predict_many(m, scenes, 0.2)):
            ref = predict_detections(m, s, 0.2)
            assert np.array_equal(d.boxes, ref.boxes) and np.array_equal(d.scores, ref.scores)
