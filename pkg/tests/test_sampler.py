import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ldct.errors import ValidationError
from ldct.sampler import (SLOT_TABLE, UNUSED_CELL, choose_pair, draw_choice, sample_subdata,
                          subsample_like)

# within-block (row, col) of each cell index, written out by hand
HAND_OFFSETS = {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1)}
# slot cells for every drawn index, written out by hand
HAND_SLOTS = {0: (0, 1, 2), 1: (1, 0, 2), 2: (2, 1, 3), 3: (3, 1, 2)}


def test_slot_table_matches_hand_enumeration():
    for i, cells in HAND_SLOTS.items():
        assert tuple(SLOT_TABLE[i]) == cells
        assert cells[0] == i
        assert cells[1] < cells[2]
        assert UNUSED_CELL[i] == ({0, 1, 2, 3} - set(cells)).pop()


def test_4x4_hand_enumeration():
    y = np.arange(16, dtype=float).reshape(4, 4)
    seed = 11
    sds = sample_subdata(y, seed)
    choice = draw_choice((4, 4), seed)
    assert np.array_equal(sds.choice, choice)
    for br in range(2):
        for bc in range(2):
            cells = HAND_SLOTS[int(choice[br, bc])]
            for k, s in enumerate((sds.s1, sds.s2, sds.s3)):
                dr, dc = HAND_OFFSETS[cells[k]]
                assert s[br, bc] == y[2 * br + dr, 2 * bc + dc]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_provenance_halving_and_coverage(h, w, seed):
    y = np.random.default_rng(seed).standard_normal((2 * h, 2 * w))
    sds = sample_subdata(y, seed)
    assert sds.s1.shape == (h, w) and sds.source_shape == y.shape
    used = np.zeros(y.shape, dtype=int)
    for k in (1, 2, 3):
        rows, cols = sds.provenance(k)
        assert np.array_equal(y[rows, cols], sds.slot(k))
        assert np.array_equal(rows // 2, np.arange(h)[:, None].repeat(w, 1))
        assert np.array_equal(cols // 2, np.arange(w)[None, :].repeat(h, 0))
        used[rows, cols] += 1
    # every block contributes exactly three distinct cells
    assert used.max() == 1
    assert np.all(used.reshape(h, 2, w, 2).sum(axis=(1, 3)) == 3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pointwise_maps_commute_with_subsampling(seed):
    y = np.abs(np.random.default_rng(seed).standard_normal((6, 8)))
    f = lambda a: np.log1p(a) ** 2
    sds = sample_subdata(y, seed)
    for k in (1, 2, 3):
        assert np.allclose(subsample_like(f(y), sds, k), f(sds.slot(k)), rtol=0, atol=0)


def test_subsample_like_torch_and_batch_axes():
    y = np.arange(48, dtype=float).reshape(6, 8)
    sds = sample_subdata(y, 5)
    t = torch.as_tensor(np.stack([y, 2 * y]))
    out = subsample_like(t, sds, 2)
    assert out.shape == (2, 3, 4)
    assert np.array_equal(out[1].numpy(), 2 * sds.s2)
    with pytest.raises(ValidationError):
        subsample_like(np.zeros((4, 4)), sds, 1)


def test_same_seed_same_draw():
    y = np.random.default_rng(0).standard_normal((8, 8))
    a, b = sample_subdata(y, 3), sample_subdata(y, 3)
    assert np.array_equal(a.choice, b.choice)
    assert not np.array_equal(a.choice, sample_subdata(y, 4).choice)


def test_odd_dimensions_rejected():
    with pytest.raises(ValidationError):
        sample_subdata(np.zeros((5, 4)), 0)
    with pytest.raises(ValidationError):
        sample_subdata(np.zeros((4, 4)), 0).provenance(4)


def test_index_choice_is_uniform():
    counts = np.bincount(draw_choice((600, 400), 9).ravel(), minlength=4) / (300 * 200)
    assert np.all(np.abs(counts * 4 - 1) < 0.02)


def test_pair_frequencies_uniform():
    n = 60_000
    counts = {}
    for k in range(n):
        pair = choose_pair(None, 2024, stream=("pair", k))
        counts[pair] = counts.get(pair, 0) + 1
    assert set(counts) == {(1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2)}
    for c in counts.values():
        assert abs(c / n * 6 - 1) < 0.02
