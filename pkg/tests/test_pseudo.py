import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from panicle_ssod import detector as M
from panicle_ssod.exceptions import InvalidConfig
from panicle_ssod.geometry import Box, ScoredBox
from panicle_ssod.pseudo import (
    DISCARDED,
    RELIABLE,
    UNCERTAIN,
    PseudoLabel,
    ThresholdState,
    assign_pseudo_labels,
    dump_pseudo_labels,
    generate_pseudo_labels,
    refine_by_jitter,
    reliability_weights,
)


def cands(scores):
    return [ScoredBox(Box(i, 0, i + 1, 1), s) for i, s in enumerate(scores)]


def statuses(scores, t1, t2):
    return [p.status for p in assign_pseudo_labels(cands(scores), ThresholdState(t1, t2))]


class TestThresholdState:
    def test_valid(self):
        assert ThresholdState(0.2, 0.2).tau1 == 0.2

    @pytest.mark.parametrize("t1, t2", [(0.6, 0.5), (-0.1, 0.5), (0.2, 1.2)])
    def test_invalid(self, t1, t2):
        with pytest.raises(InvalidConfig):
            ThresholdState(t1, t2)


class TestAssigner:
    def test_definition_cases(self):
        assert statuses([0.8, 0.5, 0.1], 0.3, 0.7) == [RELIABLE, UNCERTAIN, DISCARDED]

    def test_boundaries(self):
        assert statuses([0.7, 0.3, 0.2999], 0.3, 0.7) == [RELIABLE, UNCERTAIN, DISCARDED]

    def test_empty_band(self):
        assert UNCERTAIN not in statuses(np.linspace(0, 1, 50), 0.4, 0.4)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(0, 1), max_size=40),
        st.floats(0, 1), st.floats(0, 1),
    )
    def test_partition(self, scores, a, b):
        t1, t2 = min(a, b), max(a, b)
        labels = assign_pseudo_labels(cands(scores), ThresholdState(t1, t2))
        assert len(labels) == len(scores)
        for p, s in zip(labels, scores):
            expected = RELIABLE if s >= t2 else UNCERTAIN if s >= t1 else DISCARDED
            assert p.status == expected

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, scores, t1, lo, hi):
        lo, hi = sorted((lo, hi))
        t1 = min(t1, lo)
        rel_lo = {i for i, s in enumerate(statuses(scores, t1, lo)) if s == RELIABLE}
        rel_hi = {i for i, s in enumerate(statuses(scores, t1, hi)) if s == RELIABLE}
        assert rel_hi <= rel_lo
        d_lo = {i for i, s in enumerate(statuses(scores, lo, hi)) if s == DISCARDED}
        d_t1 = {i for i, s in enumerate(statuses(scores, t1, hi)) if s == DISCARDED}
        assert d_t1 <= d_lo


class TestReliability:
    def test_background_probability_on_negatives(self):
        logits = torch.tensor([[0.0, 2.0, -1.0, 5.0]], dtype=torch.float64)
        w = reliability_weights(logits, torch.tensor([[0, 0, 1, -1]]))
        expected = [0.5, 1 / (1 + np.exp(2.0)), 1.0, 1.0]
        assert np.allclose(w.numpy()[0], expected, atol=1e-12)

    def test_range_and_no_grad(self):
        logits = torch.randn(3, 20, dtype=torch.float64, requires_grad=True)
        w = reliability_weights(logits, torch.zeros(3, 20, dtype=torch.long))
        assert not w.requires_grad
        assert torch.all((w > 0) & (w < 1))


class TestJitter:
    anchors = M.build_anchors(8, [(12, 12), (20, 20), (32, 32)], 128)

    def exact_output(self, box):
        # a teacher whose box head regresses every anchor onto ``box``
        deltas = M.encode(np.tile(np.array(box.as_tuple()), (len(self.anchors), 1)), self.anchors.boxes)
        return M.DetectorOutput(torch.zeros(len(self.anchors)), torch.from_numpy(deltas))

    def test_consistent_teacher_keeps_box(self):
        box = Box(40, 40, 60, 62)
        out = self.exact_output(box)
        refined = refine_by_jitter(out, self.anchors, ScoredBox(box, 0.9), 10, 0.06, 0.02, np.random.default_rng(0))
        assert refined is not None
        assert np.allclose(refined.as_tuple(), box.as_tuple(), atol=1e-6)

    def test_noisy_teacher_drops_box(self):
        rng = np.random.default_rng(1)
        out = M.DetectorOutput(torch.zeros(len(self.anchors)),
                               torch.from_numpy(rng.normal(0, 1.5, size=(len(self.anchors), 4))))
        box = Box(40, 40, 60, 62)
        assert refine_by_jitter(out, self.anchors, ScoredBox(box, 0.9), 10, 0.2, 0.02, rng) is None

    def test_invalid(self):
        box = Box(0, 0, 10, 10)
        with pytest.raises(InvalidConfig):
            refine_by_jitter(self.exact_output(box), self.anchors, ScoredBox(box, 1.0), 0, 0.1, 0.1,
                             np.random.default_rng(0))


def test_generate_respects_threshold():
    torch.manual_seed(0)
    model = M.Detector()
    with torch.no_grad():
        model.score_head.bias.fill_(10.0)
    model.train()
    img = np.random.default_rng(0).random((128, 128, 3))
    dets = generate_pseudo_labels(model, img, conf_threshold=0.5, nms_iou=0.1)
    assert dets and all(d.score >= 0.5 for d in dets)
    assert model.training
    with torch.no_grad():
        model.score_head.bias.fill_(-10.0)
    assert generate_pseudo_labels(model, img, conf_threshold=0.5) == []


def test_dump_jsonl(tmp_path):
    labels = [("a", PseudoLabel(Box(0, 0, 2, 2), 0.9, RELIABLE)), ("b", PseudoLabel(Box(1, 1, 3, 4), 0.2, UNCERTAIN))]
    dump_pseudo_labels(tmp_path / "x" / "p.jsonl", labels)
    rows = [json.loads(line) for line in (tmp_path / "x" / "p.jsonl").read_text().splitlines()]
    assert rows[1] == {"image_id": "b", "box": [1, 1, 3, 4], "score": 0.2, "status": UNCERTAIN}
