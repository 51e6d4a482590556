import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.autograd import gradcheck

from tabparse.detector import (KINDS, MAX_OFFSET, CornerHead, CornerPoint, FastRCNNHead, TableDetector,
                               assign_proposal_labels, corner_loss, decode_corners, decode_quad_offsets, detect_tables,
                               detector_loss, encode_quad_offsets, enumerate_proposals, focal_term, frcn_loss,
                               gaussian_radius, jitter_boxes, make_corner_targets, ohem_select, random_boxes,
                               stack_targets)
from tabparse.geometry import Box, iou


def test_corner_head_shapes():
    head = CornerHead(64).eval()
    with torch.no_grad():
        outputs = head(torch.randn(1, 64, 32, 32))
    for kind in KINDS:
        heat, off = outputs[kind]
        assert heat.shape == (1, 1, 32, 32)
        assert off.shape == (1, 2, 32, 32)
        assert float(heat.min()) >= 0.0 and float(heat.max()) <= 1.0


def test_corner_head_zero_weights_give_half():
    head = CornerHead(16).eval()
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        outputs = head(torch.randn(1, 16, 8, 8))
    for kind in KINDS:
        assert torch.allclose(outputs[kind][0], torch.full((1, 1, 8, 8), 0.5))


def test_corner_targets_positive_and_offset():
    targets = make_corner_targets([Box(37, 21, 100, 60)], (20, 20), 16)
    t = targets["top_left"]
    assert t.heatmap[1, 2] == 1.0
    assert t.mask[1, 2] and t.mask.sum() == 1
    assert t.offsets[:, 1, 2] == pytest.approx([0.3125, 0.3125])

    aligned = make_corner_targets([Box(32, 16, 100, 60)], (20, 20), 16)["top_left"]
    assert aligned.heatmap[1, 2] == 1.0
    assert aligned.offsets[:, 1, 2] == pytest.approx([0.0, 0.0])


def test_corner_targets_gaussian_penalty():
    box = Box(32, 32, 160, 96)
    targets = make_corner_targets([box], (20, 20), 16)["top_left"]
    r = int(gaussian_radius(box.h / 16, box.w / 16))
    assert r >= 1
    assert targets.heatmap[2, 2 + r] == pytest.approx(math.exp(-4.5), rel=1e-5)
    assert targets.heatmap.max() == 1.0 and targets.heatmap.min() >= 0.0


def test_corner_targets_clamp_outside_corners():
    targets = make_corner_targets([Box(100, 100, 400, 400)], (10, 10), 16)
    assert targets["bottom_right"].mask[9, 9]


def test_stack_targets_shapes():
    per_image = [make_corner_targets([Box(10, 10, 50, 40)], (6, 8), 16) for _ in range(3)]
    stacked = stack_targets(per_image)
    for kind in KINDS:
        assert stacked[kind]["heatmap"].shape == (3, 1, 6, 8)
        assert stacked[kind]["offsets"].shape == (3, 2, 6, 8)
        assert stacked[kind]["mask"].shape == (3, 1, 6, 8)


def test_decode_single_peak():
    heat = np.zeros((4, 4))
    off = np.zeros((2, 4, 4))
    heat[2, 1] = 0.9
    off[:, 2, 1] = (0.25, 0.5)
    corners = decode_corners(heat, off, 16, top_k=100, score_threshold=0.3)
    assert corners == [CornerPoint("top_left", 20.0, 40.0, pytest.approx(0.9))]
    heat[2, 1] = 0.2
    assert decode_corners(heat, off, 16, top_k=100, score_threshold=0.3) == []


def _decode_oracle(heat, off, stride, top_k, threshold):
    h, w = heat.shape
    peaks = []
    for y in range(h):
        for x in range(w):
            window = heat[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
            if heat[y, x] == window.max():
                peaks.append((-heat[y, x], y * w + x, x, y))
    peaks.sort()
    out = []
    for neg, _, x, y in peaks[:top_k]:
        if -neg >= threshold:
            out.append(((x + off[0, y, x]) * stride, (y + off[1, y, x]) * stride, -neg))
    return out


@settings(max_examples=100)
@given(seed=st.integers(0, 10_000), top_k=st.integers(1, 12))
def test_decode_matches_exhaustive_scan(seed, top_k):
    rng = np.random.default_rng(seed)
    heat = rng.integers(0, 4, size=(5, 6)) / 3.0          # plateaus on purpose
    off = rng.uniform(0, 1, size=(2, 5, 6))
    got = [v for c in decode_corners(heat, off, 8, top_k, 0.3) for v in (c.x, c.y, c.score)]
    want = [v for corner in _decode_oracle(heat, off, 8, top_k, 0.3) for v in corner]
    assert got == pytest.approx(want)


def test_targets_decode_round_trip():
    boxes = [Box(37, 21, 120, 90), Box(205, 180, 90, 70)]
    targets = make_corner_targets(boxes, (24, 24), 16)
    for kind, corners in (("top_left", [(b.x, b.y) for b in boxes]), ("bottom_right", [(b.x2, b.y2) for b in boxes])):
        t = targets[kind]
        decoded = decode_corners(t.heatmap, t.offsets, 16, top_k=100, score_threshold=0.99, kind=kind)
        assert len(decoded) == len(corners)
        for qx, qy in corners:
            assert min(math.hypot(c.x - qx, c.y - qy) for c in decoded) <= 1.0


def test_enumerate_proposals_examples():
    tl = [CornerPoint("top_left", 10, 10, 0.9)]
    br = [CornerPoint("bottom_right", 100, 50, 0.8)]
    proposals = enumerate_proposals(tl, br)
    assert len(proposals) == 1
    assert proposals[0].box == Box(10, 10, 90, 40)
    assert proposals[0].score == pytest.approx(0.85)
    assert enumerate_proposals([CornerPoint("top_left", 100, 50, 0.9)], [CornerPoint("bottom_right", 10, 10, 0.9)]) == []


@settings(max_examples=100)
@given(seed=st.integers(0, 10_000))
def test_enumerate_proposals_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tl = [CornerPoint("top_left", *rng.integers(0, 60, 2).astype(float), float(rng.uniform(0.3, 1))) for _ in range(2)]
    br = [CornerPoint("bottom_right", *rng.integers(20, 100, 2).astype(float), float(rng.uniform(0.3, 1)))
          for _ in range(2)]
    candidates = [(Box.from_xyxy(a.x, a.y, b.x, b.y), (a.score + b.score) / 2)
                  for a in tl for b in br if a.x < b.x and a.y < b.y]
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1], i))
    kept = []
    for i in order:
        if all(iou(candidates[i][0], candidates[k][0]) <= 0.7 for k in kept):
            kept.append(i)
    got = enumerate_proposals(tl, br, 0.7)
    assert [(p.box, p.score) for p in got] == [(candidates[i][0], pytest.approx(candidates[i][1])) for i in kept]
    for p in got:
        assert p.box.x < p.box.x2 and p.box.y < p.box.y2


def test_frcn_head_outputs():
    head = FastRCNNHead(64).eval()
    rois = torch.tensor([[0, 0, 0, 100, 80], [0, 32, 32, 300, 200], [0, 5, 5, 40, 40]], dtype=torch.float32)
    with torch.no_grad():
        scores, offsets = head(torch.randn(1, 64, 32, 32), rois, 16)
    assert scores.shape == (3,) and offsets.shape == (3, 8)
    assert float(scores.min()) >= 0 and float(scores.max()) <= 1


def test_quad_offsets_round_trip():
    props = torch.tensor([[10.0, 20.0, 110.0, 70.0]])
    assert decode_quad_offsets(props, torch.zeros(1, 8)).tolist() == [[10, 20, 110, 20, 110, 70, 10, 70]]
    quads = torch.tensor([[12.0, 18.0, 111.0, 22.0, 108.0, 73.0, 9.0, 69.0]])
    assert torch.allclose(decode_quad_offsets(props, encode_quad_offsets(props, quads)), quads)


def test_assign_proposal_labels():
    gt = np.array([[0, 0, 100, 100]], dtype=float)
    props = np.array([[0, 0, 100, 100], [300, 300, 400, 400], [0, 0, 100, 60]], dtype=float)
    labels, matched = assign_proposal_labels(props, gt)
    assert labels.tolist() == [1, 0, -1]
    assert matched[0] == 0
    labels, _ = assign_proposal_labels(props, np.zeros((0, 4)))
    assert labels.tolist() == [0, 0, 0]


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), pos=st.integers(0, 8), neg=st.integers(0, 8))
def test_ohem_select_respects_labels_and_quotas(seed, pos, neg):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, 2, size=30)
    losses = rng.uniform(size=30)
    picked = ohem_select(losses, labels, pos, neg)
    assert (labels[picked] >= 0).all()
    assert (labels[picked] == 1).sum() <= pos and (labels[picked] == 0).sum() <= neg
    assert len(set(picked.tolist())) == len(picked)
    positives = np.flatnonzero(labels == 1)
    if len(positives) and pos:
        assert losses[picked[labels[picked] == 1]].max() == losses[positives].max()


def test_focal_single_pixel():
    got = focal_term(torch.tensor([[[[0.5]]]]), torch.ones(1, 1, 1, 1))
    assert float(got) == pytest.approx(-(0.5 ** 2) * math.log(0.5))


def test_focal_matches_direct_sum():
    rng = np.random.default_rng(4)
    heat = rng.uniform(0.01, 0.99, size=(3, 4))
    target = rng.uniform(0, 0.9, size=(3, 4))
    target[1, 2] = 1.0
    want = 0.0
    for p, t in zip(heat.ravel(), target.ravel()):
        if t == 1.0:
            want += -math.log(p) * (1 - p) ** 2
        else:
            want += -math.log(1 - p) * p ** 2 * (1 - t) ** 4
    got = focal_term(torch.from_numpy(heat).view(1, 1, 3, 4), torch.from_numpy(target).view(1, 1, 3, 4))
    assert float(got) == pytest.approx(want)


def test_corner_loss_perfect_prediction_is_near_zero():
    targets = make_corner_targets([Box(20, 20, 60, 50)], (8, 8), 16)
    outputs = {}
    for kind in KINDS:
        t = targets[kind]
        heat = torch.from_numpy((t.heatmap == 1.0).astype(np.float32))[None, None]
        outputs[kind] = (heat, torch.from_numpy(t.offsets)[None])
    assert float(corner_loss(outputs, stack_targets([targets]), 1)) < 1e-6


def test_corner_loss_without_tables():
    outputs = {k: (torch.full((1, 1, 4, 4), 0.01), torch.zeros(1, 2, 4, 4)) for k in KINDS}
    targets = stack_targets([make_corner_targets([], (4, 4), 16)])
    assert float(corner_loss(outputs, targets, 0)) == 0.0


def test_frcn_loss_examples():
    scores = torch.tensor([1.0, 0.0])
    labels = torch.tensor([1, 0])
    offsets = torch.zeros(2, 8)
    assert float(frcn_loss(scores, labels, offsets, torch.zeros(2, 8))) == pytest.approx(0.0, abs=1e-5)

    target = torch.full((1, 8), 0.25)
    got = frcn_loss(torch.tensor([0.5]), torch.tensor([1]), torch.zeros(1, 8), target)
    assert float(got) == pytest.approx(-math.log(0.5) + 8 * 0.25)
    assert float(frcn_loss(torch.zeros(0), torch.zeros(0), torch.zeros(0, 8), torch.zeros(0, 8))) == 0.0


def test_detector_loss_weights():
    assert float(detector_loss(torch.tensor(0.0), torch.tensor(0.0))) == 0.0
    assert float(detector_loss(torch.tensor(1.0), torch.tensor(0.5))) == pytest.approx(0.7)
    a, b = torch.rand(()), torch.rand(())
    assert torch.allclose(detector_loss(a, b), 0.2 * a + b)


def test_jitter_and_random_boxes_are_valid():
    rng = np.random.default_rng(0)
    gt = np.array([[10, 10, 200, 120]], dtype=float)
    jittered = jitter_boxes(gt, rng, 16, 0.1)
    assert len(jittered) == 16
    assert (jittered[:, 2] > jittered[:, 0]).all() and (jittered[:, 3] > jittered[:, 1]).all()
    assert np.abs(jittered - gt).max() <= 0.1 * 190 + 1e-9
    boxes = random_boxes(rng, 20, 300, 200)
    assert boxes.shape == (20, 4)
    assert (boxes[:, 2] - boxes[:, 0] >= 16 - 1e-9).all()


def test_detect_tables_on_blank_page_is_empty(tiny_model_config):
    model = TableDetector(tiny_model_config)
    with torch.no_grad():
        for kind in KINDS:
            model.head.heat[kind][-1].bias.fill_(-10.0)
    assert detect_tables(model, np.full((300, 400, 3), 255, dtype=np.uint8)) == []


def test_detect_tables_restores_training_mode(tiny_model_config):
    model = TableDetector(tiny_model_config).train()
    detect_tables(model, np.full((300, 400, 3), 255, dtype=np.uint8))
    assert model.training
    assert all(m.training for m in model.modules())

    model.eval()
    detect_tables(model, np.full((300, 400, 3), 255, dtype=np.uint8))
    assert not model.training


def test_corner_offsets_stay_below_one_cell():
    targets = make_corner_targets([Box(100, 100, 400, 400)], (10, 10), 16)
    assert targets["bottom_right"].offsets[:, 9, 9] == pytest.approx([MAX_OFFSET, MAX_OFFSET])
    assert MAX_OFFSET < 1.0


def _spread_weights(module, std=0.5):
    for m in module.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            torch.nn.init.normal_(m.weight, std=std)
    return module


def test_corner_head_gradcheck():
    head = _spread_weights(CornerHead(2)).double().eval()
    c5 = torch.randn(1, 2, 5, 6, dtype=torch.float64, requires_grad=True)

    def flat(t):
        return torch.cat([torch.cat([heat.flatten(), off.flatten()]) for heat, off in head(t).values()])

    assert gradcheck(flat, (c5,), eps=1e-6, atol=1e-4, rtol=1e-4)


def test_frcn_head_gradcheck():
    head = _spread_weights(FastRCNNHead(2, hidden=8, pool=2)).double()
    c5 = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    rois = torch.tensor([[0, 4.0, 6.0, 26.0, 20.0], [0, 0.0, 0.0, 31.0, 31.0]], dtype=torch.float64)
    assert gradcheck(lambda t: head(t, rois, 4), (c5,), eps=1e-6, atol=1e-4, rtol=1e-4)
