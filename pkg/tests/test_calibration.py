"""Shift profiling, pruning-layer selection, and the synthetic stack builder."""

import numpy as np
import pytest

from btp.calibration import (
    LayerSelection,
    ShiftEntry,
    ShiftProfile,
    aggregate_profiles,
    build_schedule,
    select_pruning_layers,
    shift_profile,
    synthetic_shift_stack,
)
from btp.errors import ValidationError
from btp.trace import PruningSchedule, PruningStage


def _profile(counts, attention=None):
    entries = tuple(
        ShiftEntry(
            layer=l,
            shifted_count=int(c),
            attention_to_image=None if attention is None else float(attention[l]),
        )
        for l, c in enumerate(counts)
    )
    return ShiftProfile(per_layer=entries)


# ---------------------------------------------------------------------------
# profiles


def test_profile_validation():
    with pytest.raises(ValidationError):
        ShiftProfile(per_layer=())
    with pytest.raises(ValidationError):
        ShiftProfile(per_layer=(ShiftEntry(layer=1, shifted_count=0),))
    with pytest.raises(ValidationError):
        ShiftProfile(
            per_layer=(ShiftEntry(0, 2), ShiftEntry(1, -1))
        )
    prof = _profile([3, 0, 5])
    np.testing.assert_array_equal(prof.counts, [3, 0, 5])
    assert prof.num_layers == 3


def test_shift_profile_hand_case():
    c45 = np.sqrt(0.5)
    stack = np.array([
        [[1.0, 0.0], [0.0, 1.0]],
        [[1.0, 0.0], [c45, c45]],   # token 1 rotates 45 degrees: cos 0.707 < tau
        [[1.0, 0.0], [c45, c45]],
    ])
    prof = shift_profile(stack, tau=0.93)
    np.testing.assert_array_equal(prof.counts, [1, 0])


def test_shift_profile_threshold_is_strict():
    c45 = np.sqrt(0.5)
    stack = np.array([
        [[1.0, 0.0]],
        [[c45, c45]],
        [[c45, c45]],
    ])
    assert shift_profile(stack, tau=0.7072).counts[0] == 1
    assert shift_profile(stack, tau=0.707).counts[0] == 0


def test_shift_profile_input_validation():
    stack = np.ones((3, 2, 2))
    with pytest.raises(ValidationError):
        shift_profile(stack, tau=1.0)
    with pytest.raises(ValidationError):
        shift_profile(stack, tau=0.0)
    with pytest.raises(ValidationError):
        shift_profile(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        shift_profile(np.ones((2, 2, 2)))  # only one transition
    bad = stack.copy()
    bad[1, 0] = 0.0
    with pytest.raises(ValidationError, match="snapshot 1, image token 0"):
        shift_profile(bad)


def test_shift_profile_attention_curve():
    stack = np.ones((3, 2, 2))
    prof = shift_profile(stack, attention_to_image=[0.5, 0.25])
    assert [e.attention_to_image for e in prof.per_layer] == [0.5, 0.25]
    with pytest.raises(ValidationError):
        shift_profile(stack, attention_to_image=[0.5])


def test_shift_profile_scale_invariant():
    """Cosine shifts ignore per-token magnitude, so rescaling rows is a no-op."""
    rng = np.random.default_rng(20)
    stack = synthetic_shift_stack(rng, num_layers=6, n_image=10, d=8, shifted={2: 7})
    scaled = stack * rng.uniform(0.1, 10.0, size=stack.shape[:2])[:, :, None].astype(np.float32)
    assert shift_profile(stack).counts.tolist() == shift_profile(scaled).counts.tolist()


def test_synthetic_stack_plants_exact_counts():
    rng = np.random.default_rng(21)
    stack = synthetic_shift_stack(rng, num_layers=8, n_image=12, d=16, shifted={1: 5, 6: 9})
    assert stack.shape == (9, 12, 16)
    np.testing.assert_allclose(np.linalg.norm(stack, axis=2), 1.0, atol=1e-6)
    np.testing.assert_array_equal(shift_profile(stack).counts, [0, 5, 0, 0, 0, 0, 9, 0])


def test_synthetic_stack_validation():
    rng = np.random.default_rng(22)
    with pytest.raises(ValidationError):
        synthetic_shift_stack(rng, 4, 6, 1, {})
    with pytest.raises(ValidationError):
        synthetic_shift_stack(rng, 4, 6, 8, {4: 1})
    with pytest.raises(ValidationError):
        synthetic_shift_stack(rng, 4, 6, 8, {0: 7})
    with pytest.raises(ValidationError):
        synthetic_shift_stack(rng, 4, 6, 8, {}, stable_cos=0.9)  # below tau


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_sums_counts_and_ignores_order():
    a = _profile([1, 0, 4])
    b = _profile([2, 2, 0])
    c = _profile([0, 1, 1])
    forward = aggregate_profiles([a, b, c])
    backward = aggregate_profiles([c, b, a])
    np.testing.assert_array_equal(forward.counts, [3, 3, 5])
    assert forward == backward


def test_aggregate_attention_curves():
    a = _profile([1, 0], attention=[0.5, 0.3])
    b = _profile([0, 2], attention=[0.7, 0.1])
    agg = aggregate_profiles([a, b])
    assert [e.attention_to_image for e in agg.per_layer] == pytest.approx([0.6, 0.2])
    partial = aggregate_profiles([a, _profile([0, 2])])
    assert all(e.attention_to_image is None for e in partial.per_layer)


def test_aggregate_validation():
    with pytest.raises(ValidationError):
        aggregate_profiles([])
    with pytest.raises(ValidationError):
        aggregate_profiles([_profile([1, 2]), _profile([1, 2, 3])])


# ---------------------------------------------------------------------------
# layer selection


def test_peaks_emit_the_following_layer():
    prof = _profile([0, 0, 9, 0, 0, 11, 0, 1, 0, 0, 0, 0])
    got = select_pruning_layers(prof, num_stages=2)
    assert got == LayerSelection(layers=(3, 6), fallback=False)


def test_small_bumps_below_mean_are_not_peaks():
    # layer 7 is a strict local max but sits below the profile mean
    prof = _profile([0, 0, 9, 0, 0, 11, 0, 1, 0, 0, 0, 0])
    got = select_pruning_layers(prof, num_stages=3)
    assert 8 not in got.layers


def test_flat_profile_falls_back_to_even_subdivision():
    got = select_pruning_layers(_profile([2] * 32), num_stages=3)
    assert got == LayerSelection(layers=(8, 16, 24), fallback=True)
    got4 = select_pruning_layers(_profile([2, 2, 2, 2]), num_stages=2)
    assert got4 == LayerSelection(layers=(1, 3), fallback=True)


def test_peak_ranking_prefers_count_then_earlier_layer():
    prof = _profile([0, 7, 0, 7, 0])
    got = select_pruning_layers(prof, num_stages=1)
    assert got.layers == (2,)


def test_min_gap_pushes_to_other_positions():
    prof = _profile([0, 10, 0, 9, 0, 0])
    got = select_pruning_layers(prof, num_stages=2, min_gap=3)
    assert got.layers == (2, 5) and not got.fallback


def test_peak_at_last_layer_has_no_room_after():
    prof = _profile([0, 0, 5])
    got = select_pruning_layers(prof, num_stages=1)
    # the only peak shifts across the final layer; padding fills the slot
    assert got == LayerSelection(layers=(2,), fallback=False)


def test_selection_validation():
    prof = _profile([0, 3, 0])
    with pytest.raises(ValidationError):
        select_pruning_layers(prof, num_stages=0)
    with pytest.raises(ValidationError):
        select_pruning_layers(prof, num_stages=4)
    with pytest.raises(ValidationError):
        select_pruning_layers(prof, num_stages=1, min_gap=0)


# ---------------------------------------------------------------------------
# schedule assembly


def test_build_schedule():
    sched = build_schedule([3, 6], [0.5, 0.25], [0.4, 0.8], num_layers=12)
    assert sched == PruningSchedule(
        stages=(PruningStage(3, 0.5, 0.4), PruningStage(6, 0.25, 0.8)),
        num_layers=12,
    )


def test_build_schedule_validation():
    with pytest.raises(ValidationError):
        build_schedule([3, 6], [0.5], [0.4, 0.8], num_layers=12)
    with pytest.raises(ValidationError):  # balances must be non-decreasing
        build_schedule([3, 6], [0.5, 0.5], [0.8, 0.4], num_layers=12)
    with pytest.raises(ValidationError):  # layer beyond depth
        build_schedule([3, 12], [0.5, 0.5], [0.4, 0.8], num_layers=12)
