"""Annotation encodings, label pyramids and loss reductions."""

import numpy as np
import pytest

import fluidseg.autodiff as ad
from fluidseg.autodiff import Tensor
from fluidseg.errors import ContractError, DataError, DimensionError
from fluidseg.supervision import (AnnotationRecord, boxes_to_boxmask, build_pyramid,
                                  decode_mask, derive_boxes, derive_global,
                                  downscale_mask, encode_mask, loss_bce, loss_mil,
                                  loss_mlds)

LN2 = 0.6931471805599453


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grid = rng.integers(0, 4, (8, 8))
        onehot = encode_mask(grid, 4)
        assert onehot.shape == (4, 8, 8)
        np.testing.assert_array_equal(onehot.sum(axis=0), np.ones((8, 8)))
        np.testing.assert_array_equal(decode_mask(onehot), grid)


def test_encode_mask_rejects_out_of_range():
    with pytest.raises(DataError):
        encode_mask(np.array([[0, 4]]), 4)
    with pytest.raises(DimensionError):
        encode_mask(np.zeros((2, 2, 2)), 4)


def test_decode_mask_rejects_non_onehot():
    bad = np.zeros((3, 2, 2), dtype=np.uint8)
    bad[0, 0, 0] = 1
    bad[1, 0, 0] = 1
    with pytest.raises(DataError):
        decode_mask(bad)


def test_boxmask_rasterization_and_background():
    bm = boxes_to_boxmask([(0, 1, 0, 2, 1), (1, 2, 2, 3, 3)], 3, 4, 4)
    assert bm[0].sum() == 4 and bm[0, 0, 1] and bm[0, 1, 2]
    assert bm[1].sum() == 4 and bm[1, 2, 2] and bm[1, 3, 3]
    np.testing.assert_array_equal(bm[2], 1 - np.maximum(bm[0], bm[1]))
    with pytest.raises(DataError):
        boxes_to_boxmask([(2, 0, 0, 1, 1)], 3, 4, 4)  # background class
    with pytest.raises(DataError):
        boxes_to_boxmask([(0, 3, 0, 1, 1)], 3, 4, 4)  # inverted corners


def test_derive_boxes_per_component():
    grid = np.full((6, 8), 1)  # background for num_classes=2
    grid[0:2, 0:3] = 0
    grid[4:6, 5:8] = 0
    boxes = derive_boxes(encode_mask(grid, 2))
    assert sorted(boxes) == [(0, 0, 0, 2, 1), (0, 5, 4, 7, 5)]


def test_derive_boxes_diagonal_is_two_components():
    grid = np.full((4, 4), 1)
    grid[0, 0] = 0
    grid[1, 1] = 0  # touches only diagonally: 4-connectivity splits it
    boxes = derive_boxes(encode_mask(grid, 2))
    assert sorted(boxes) == [(0, 0, 0, 0, 0), (0, 1, 1, 1, 1)]


def test_derive_global_presence_bits():
    grid = np.full((4, 4), 3)
    grid[0, 0] = 1
    np.testing.assert_array_equal(derive_global(encode_mask(grid, 4)), [0, 1, 0, 1])


def test_downscale_mask_hand_case():
    mask = np.zeros((1, 4, 4), dtype=np.uint8)
    mask[0, 0, 1] = 1
    mask[0, 3, 3] = 1
    out = downscale_mask(mask, 2, 2)
    np.testing.assert_array_equal(out[0], [[1, 0], [0, 1]])


def test_downscale_mask_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = int(rng.integers(1, 4))
        h = int(rng.choice([4, 8, 12]))
        w = int(rng.choice([4, 8, 12]))
        mask = (rng.random((c, h, w)) < 0.3).astype(np.uint8)
        for oh, ow in ((h // 2, w // 2), (1, 1), (h, w)):
            got = downscale_mask(mask, oh, ow)
            fy, fx = h // oh, w // ow
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        win = mask[ch, i * fy : (i + 1) * fy, j * fx : (j + 1) * fx]
                        assert got[ch, i, j] == win.any()


def test_downscale_mask_requires_integral_windows():
    with pytest.raises(DimensionError):
        downscale_mask(np.zeros((1, 6, 6), dtype=np.uint8), 4, 4)


def test_pyramid_containment_under_coarsening():
    rng = np.random.default_rng(2)
    sizes = [(4, 4), (8, 8), (16, 16)]
    for _ in range(30):
        mask = (rng.random((3, 16, 16)) < 0.2).astype(np.uint8)
        pyr = build_pyramid(mask, sizes)
        assert len(pyr.levels) == 3 and pyr.source == "ground_truth"
        np.testing.assert_array_equal(pyr.levels[-1], mask)
        for coarse, fine in zip(pyr.levels, pyr.levels[1:]):
            f = fine.shape[1] // coarse.shape[1]
            up = np.repeat(np.repeat(coarse, f, axis=1), f, axis=2)
            assert not np.any(fine > up)  # foreground never lost going coarse


def test_annotation_record_tier_consistency():
    img = np.zeros((3, 4, 4))
    AnnotationRecord(image=img, tier="none")
    AnnotationRecord(image=img, tier="global", global_label=np.ones(3, dtype=np.uint8))
    with pytest.raises(DataError):
        AnnotationRecord(image=img, tier="mask")  # claims mask, has none
    with pytest.raises(DataError):
        AnnotationRecord(image=img, tier="global",
                         boxmask=np.ones((3, 4, 4), dtype=np.uint8))
    with pytest.raises(DataError):
        AnnotationRecord(image=img, tier="orbit")


def test_loss_mlds_averages_levels():
    l0 = Tensor(np.zeros((2, 3, 2, 2)), requires_grad=True)
    l1 = Tensor(np.zeros((2, 3, 4, 4)), requires_grad=True)
    t0 = np.zeros((2, 3, 2, 2))
    t1 = np.ones((2, 3, 4, 4))
    out = loss_mlds([l0, l1], [t0, t1])
    np.testing.assert_allclose(out.data, LN2, atol=1e-12)  # both levels are ln 2
    with pytest.raises(ContractError):
        loss_mlds([l0], [t0, t1])


def test_loss_mil_pools_then_classifies():
    feat = Tensor(np.zeros((2, 4, 4, 4)), requires_grad=True)
    g = np.array([[1, 0, 1, 0], [0, 1, 0, 1]], dtype=np.float64)
    out = loss_mil(feat, lambda t: t, g)  # identity head on pooled zeros
    np.testing.assert_allclose(out.data, LN2, atol=1e-12)
    out.backward()
    assert feat.grad is not None  # gradient reaches the feature through the pool


def test_loss_bce_accepts_tensor_target():
    logits = Tensor(np.zeros((2, 2)))
    np.testing.assert_allclose(loss_bce(logits, np.zeros((2, 2))).data, LN2,
                               atol=1e-12)
    with pytest.raises(DimensionError):
        ad.bce_with_logits(logits, np.zeros((2, 3)))
