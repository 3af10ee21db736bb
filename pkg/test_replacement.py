#!/usr/bin/env python3
"""
Tests for the local replacement operators and training-image synthesis
"""
import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from data import ImageSample, LabeledDataset, make_synthetic_dataset
from errors import ConfigurationError, UsageError
from replacement import (BlockAug, BlockDef, GridSpec, RandEra, apply_replacement, block_mask, choose_blocks,
                         draw_training_donor, method_from_name, synthesize_training_image, with_max_blocks)


def random_pair(rng, side=9, channels=3):
    target = rng.random((channels, side, side)).astype(np.float32)
    source = rng.random((channels, side, side)).astype(np.float32)
    return target, source


def test_grid_tiles_the_image_exactly():
    for height, width in ((9, 9), (32, 32), (10, 7)):
        coverage = np.zeros((height, width), dtype=np.int64)
        for top, bottom, left, right in GridSpec(3, 3).block_bounds(height, width):
            coverage[top:bottom, left:right] += 1
        assert np.all(coverage == 1)
    # remainder pixels go to the last row and column of blocks
    bounds = GridSpec(3, 3).block_bounds(32, 32)
    assert bounds[0] == (0, 10, 0, 10)
    assert bounds[8] == (20, 32, 20, 32)
    with pytest.raises(ConfigurationError):
        GridSpec(0, 3)


def test_choose_blocks_ranges():
    rng = np.random.default_rng(0)
    assert choose_blocks(BlockAug(max_blocks=0), rng) == frozenset()
    for _ in range(1000):
        blocks = choose_blocks(BlockAug(max_blocks=6), rng)
        assert 1 <= len(blocks) <= 6
        assert all(0 <= b < 9 for b in blocks)
    with pytest.raises(UsageError):
        choose_blocks(RandEra(), rng)


def test_block_frequency_monte_carlo():
    """Each block is chosen with probability E[count]/9 when the count is uniform on 1..9"""
    rng = np.random.default_rng(1)
    draws = 10_000
    counts = np.zeros(9)
    for _ in range(draws):
        for b in choose_blocks(BlockAug(max_blocks=9), rng):
            counts[b] += 1
    p = 5 / 9
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma), counts


def test_blockaug_examples():
    rng = np.random.default_rng(2)
    target, source = random_pair(rng)
    outcome = apply_replacement(target, source, BlockAug(), rng, blocks=frozenset())
    assert np.array_equal(outcome.image, target)
    assert not outcome.replaced_mask.any()

    outcome = apply_replacement(target, source, BlockAug(), rng, blocks={0, 4, 8})
    assert outcome.replaced_mask.sum() == 27
    assert outcome.replaced_fraction == pytest.approx(1 / 3)
    assert np.array_equal(outcome.image[:, :3, :3], source[:, :3, :3])
    assert np.array_equal(outcome.image[:, 3:6, 3:6], source[:, 3:6, 3:6])
    assert np.array_equal(outcome.image[:, :3, 3:6], target[:, :3, 3:6])


def test_blockdef_self_mix_is_identity():
    rng = np.random.default_rng(3)
    target, _ = random_pair(rng)
    outcome = apply_replacement(target, target.copy(), BlockDef(max_blocks=9, mix=0.5), rng)
    assert np.array_equal(outcome.image, target)

    source = np.zeros_like(target)
    outcome = apply_replacement(target, source, BlockDef(max_blocks=9, mix=0.25), rng, blocks={4})
    assert np.allclose(outcome.image[:, 3:6, 3:6], 0.75 * target[:, 3:6, 3:6])


def test_shape_mismatch_is_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        apply_replacement(np.zeros((3, 9, 9)), np.zeros((3, 8, 8)), BlockAug(), rng)


def test_method_validation():
    with pytest.raises(ConfigurationError):
        BlockAug(max_blocks=10)
    with pytest.raises(ConfigurationError):
        BlockDef(mix=1.0)
    with pytest.raises(ConfigurationError):
        RandEra(area_range=(0.3, 0.1))
    with pytest.raises(ConfigurationError):
        method_from_name("cutmix")
    assert method_from_name("BlockDef", max_blocks=2, mix=0.3) == BlockDef(max_blocks=2, mix=0.3)
    assert with_max_blocks(BlockAug(max_blocks=4), 0) == BlockAug(max_blocks=0)
    with pytest.raises(ConfigurationError, match="no block count"):
        with_max_blocks(RandEra(), 3)


def test_replacement_invariant_suite():
    """10,000 applications: area cap, bit-identical complement and determinism"""
    rng = np.random.default_rng(4)
    methods = [BlockAug(max_blocks=6), BlockDef(max_blocks=4, mix=0.5), RandEra()]
    for i in range(10_000):
        method = methods[i % 3]
        side = int(rng.integers(9, 33))
        target, source = random_pair(rng, side=side)
        outcome = apply_replacement(target, source, method, rng, source_id=7)
        mask = outcome.replaced_mask
        assert mask.shape == (side, side)
        assert outcome.replaced_fraction <= method.area_cap_for(side, side) + 1e-12
        assert np.array_equal(outcome.image[:, ~mask], target[:, ~mask])
        assert outcome.source_id == 7
        if isinstance(method, RandEra):
            assert mask.any()
            assert outcome.replaced_fraction <= 0.3
        elif isinstance(method, BlockAug):
            assert np.array_equal(outcome.image[:, mask], source[:, mask])

    target, source = random_pair(np.random.default_rng(5), side=32)
    for method in methods:
        a = apply_replacement(target, source, method, np.random.default_rng(11))
        b = apply_replacement(target, source, method, np.random.default_rng(11))
        assert np.array_equal(a.image, b.image) and np.array_equal(a.replaced_mask, b.replaced_mask)
    print("✓ Replacement invariant suite passed")


def test_divisible_sides_respect_the_nominal_cap():
    rng = np.random.default_rng(6)
    method = BlockAug(max_blocks=6)
    assert method.area_cap == pytest.approx(2 / 3)
    for _ in range(500):
        target, source = random_pair(rng, side=27)
        assert apply_replacement(target, source, method, rng).replaced_fraction <= 2 / 3 + 1e-12


def test_zero_cap_is_identity():
    rng = np.random.default_rng(7)
    for method in (BlockAug(max_blocks=0), BlockDef(max_blocks=0)):
        for _ in range(100):
            target, source = random_pair(rng)
            outcome = apply_replacement(target, source, method, rng)
            assert np.array_equal(outcome.image, target)
            assert not outcome.replaced_mask.any()


def test_randera_mask_fractions():
    rng = np.random.default_rng(8)
    fractions = []
    for _ in range(10_000):
        target, source = random_pair(rng, side=32, channels=1)
        outcome = apply_replacement(target, source, RandEra(), rng)
        fractions.append(outcome.replaced_fraction)
    fractions = np.array(fractions)
    assert fractions.max() <= 0.3
    # flooring loses at most one row and one column: hw >= A - sqrt(A) * (sqrt(r) + 1/sqrt(r)) + 1
    area = 0.1 * 32 * 32
    spread = max(np.sqrt(r) + 1 / np.sqrt(r) for r in (0.3, 3.3))
    floor_bound = (area - np.sqrt(area) * spread + 1) / (32 * 32)
    assert floor_bound > 0.07
    assert fractions.min() >= floor_bound
    assert 0.15 < fractions.mean() < 0.2


def test_block_mask_matches_bounds():
    mask = block_mask(GridSpec(3, 3), {8}, 10, 10)
    assert mask[6:, 6:].all() and mask.sum() == 16


def two_by_two_dataset():
    pixels = [np.full((3, 9, 9), v, dtype=np.float32) for v in (0.1, 0.2, 0.8, 0.9)]
    samples = [ImageSample(i, p, label) for i, (p, label) in enumerate(zip(pixels, (0, 0, 1, 1)))]
    return LabeledDataset(samples, frozenset({0, 1}), "train")


def test_training_donor_frequency():
    """2 classes x 2 images: the donor shares the target's label half of the time"""
    dataset = two_by_two_dataset()
    rng = np.random.default_rng(9)
    trials = 10_000
    same = 0
    for i in range(trials):
        index = i % 4
        donor = draw_training_donor(index, dataset, rng)
        assert donor != index
        same += int(dataset.labels[donor] == dataset.labels[index])
    sigma = np.sqrt(trials * 0.25)
    assert abs(same - trials / 2) <= 3 * sigma


def test_training_synthesis_keeps_label_and_identity_cap():
    dataset = make_synthetic_dataset(3, 4, 9, seed=1)
    rng = np.random.default_rng(10)
    for index in range(len(dataset)):
        outcome = synthesize_training_image(index, dataset, BlockAug(max_blocks=0), rng)
        assert np.array_equal(outcome.image, dataset.images[index])
        outcome = synthesize_training_image(index, dataset, BlockAug(max_blocks=4), rng)
        assert outcome.source_id != int(dataset.ids[index])
        assert outcome.replaced_mask.any()


def test_single_sample_class_falls_back_to_other_class(caplog):
    pixels = np.zeros((3, 9, 9), np.float32)
    dataset = LabeledDataset([ImageSample(0, pixels, 0), ImageSample(1, pixels, 1), ImageSample(2, pixels, 1)],
                             frozenset({0, 1}), "train")
    rng = np.random.default_rng(0)
    donors = {draw_training_donor(0, dataset, rng) for _ in range(50)}
    assert donors <= {1, 2}
    assert "single sample" in caplog.text


if __name__ == "__main__":
    print("Running replacement tests...\n")
    test_grid_tiles_the_image_exactly()
    test_blockaug_examples()
    test_replacement_invariant_suite()
    test_training_donor_frequency()
    print("\n✓ All replacement tests passed")
