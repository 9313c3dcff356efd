"""Offline calibration: locate the layers where image representations shift.

Given per-layer image hidden states from a handful of calibration prompts,
``shift_profile`` counts, for each consecutive layer pair, how many image
tokens moved by more than a cosine threshold.  Pruning right after the
layers where that count peaks is cheap and safe: the representation has
just been rewritten, so the tokens consumed downstream are already formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .trace import PruningSchedule, PruningStage, TensorBlob

DEFAULT_TAU = 0.93
DEFAULT_CALIBRATION_SIZE = 64


@dataclass(frozen=True)
class ShiftEntry:
    """Shift statistic for the transition produced by one layer."""

    layer: int
    shifted_count: int
    attention_to_image: float | None = None


@dataclass(frozen=True)
class ShiftProfile:
    """Per-layer shift counts; entry ``layer`` covers X^(l) -> X^(l+1)."""

    per_layer: tuple[ShiftEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_layer", tuple(self.per_layer))
        if len(self.per_layer) < 1:
            raise ValidationError("shift profile is empty")
        layers = [e.layer for e in self.per_layer]
        if layers != list(range(len(layers))):
            raise ValidationError(f"profile layers must be 0..L-1, got {layers}")
        if any(e.shifted_count < 0 for e in self.per_layer):
            raise ValidationError("shift counts must be non-negative")

    @property
    def counts(self) -> np.ndarray:
        return np.asarray([e.shifted_count for e in self.per_layer], dtype=np.int64)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)


def _stack_array(hidden_stack) -> np.ndarray:
    arr = hidden_stack.view() if isinstance(hidden_stack, TensorBlob) else np.asarray(hidden_stack)
    if arr.ndim != 3:
        raise ValidationError(f"hidden stack must be [L+1, N, d], got shape {arr.shape}")
    if arr.shape[0] < 3:
        raise ValidationError(
            f"hidden stack needs at least 3 snapshots (2 layers), got {arr.shape[0]}"
        )
    return arr.astype(np.float64)


def shift_profile(hidden_stack, tau: float = DEFAULT_TAU,
                  attention_to_image: Sequence[float] | None = None) -> ShiftProfile:
    """Count image tokens whose cosine to the next snapshot falls below tau.

    ``hidden_stack`` holds image hidden states for snapshots 0..L (layer
    inputs plus the final output), shape [L+1, N, d]; entry l of the result
    counts tokens with cos(X^(l)_i, X^(l+1)_i) < tau.  The optional
    ``attention_to_image`` curve (one value per layer) is carried through
    as a diagnostic.
    """
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must be in (0, 1), got {tau}")
    stack = _stack_array(hidden_stack)
    norms = np.linalg.norm(stack, axis=2)
    zero = np.argwhere(norms == 0)
    if zero.size:
        snap, tok = zero[0]
        raise ValidationError(
            f"zero-norm hidden state at snapshot {snap}, image token {tok}"
        )
    num_pairs = stack.shape[0] - 1
    if attention_to_image is not None and len(attention_to_image) != num_pairs:
        raise ValidationError(
            f"attention curve has {len(attention_to_image)} entries, want {num_pairs}"
        )
    entries = []
    for l in range(num_pairs):
        cos = (stack[l] * stack[l + 1]).sum(axis=1) / (norms[l] * norms[l + 1])
        count = int(np.count_nonzero(cos < tau))
        att = float(attention_to_image[l]) if attention_to_image is not None else None
        entries.append(ShiftEntry(layer=l, shifted_count=count, attention_to_image=att))
    return ShiftProfile(per_layer=tuple(entries))


def aggregate_profiles(profiles: Iterable[ShiftProfile]) -> ShiftProfile:
    """Sum per-sample shift counts into one calibration profile.

    Counts add, so the result is invariant to sample order; attention
    curves are averaged when every profile carries one, else dropped.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValidationError("no profiles to aggregate")
    length = profiles[0].num_layers
    if any(p.num_layers != length for p in profiles):
        raise ValidationError("profiles cover different layer counts")
    have_att = all(
        all(e.attention_to_image is not None for e in p.per_layer) for p in profiles
    )
    entries = []
    for l in range(length):
        count = sum(p.per_layer[l].shifted_count for p in profiles)
        att = (
            sum(p.per_layer[l].attention_to_image for p in profiles) / len(profiles)
            if have_att
            else None
        )
        entries.append(ShiftEntry(layer=l, shifted_count=count, attention_to_image=att))
    return ShiftProfile(per_layer=tuple(entries))


@dataclass(frozen=True)
class LayerSelection:
    """Chosen pruning layers; ``fallback`` flags a flat profile."""

    layers: tuple[int, ...]
    fallback: bool


def _even_subdivision(num_layers: int, num_stages: int) -> list[int]:
    # e.g. 32 layers, 3 stages -> [8, 16, 24]
    return [round((i + 1) * num_layers / (num_stages + 1)) for i in range(num_stages)]


def select_pruning_layers(profile: ShiftProfile, num_stages: int, min_gap: int = 1) -> LayerSelection:
    """Pick pruning layers from a shift profile.

    Peaks are strict local maxima of the count curve (one-sided at the
    ends) that also exceed the profile mean.  Peaks are ranked by count
    (higher first, earlier layer on ties) and greedily accepted unless the
    emitted layer, which is peak + 1 so pruning happens right after the
    shift, lands within ``min_gap`` of an accepted one.  The list is then
    sorted ascending and truncated or padded by even subdivision of the
    depth.  A profile with no qualifying peak falls back entirely to even
    subdivision, flagged via ``fallback``.
    """
    if num_stages < 1:
        raise ValidationError(f"num_stages must be >= 1, got {num_stages}")
    if min_gap < 1:
        raise ValidationError(f"min_gap must be >= 1, got {min_gap}")
    counts = profile.counts
    num_layers = profile.num_layers
    if num_stages > num_layers:
        raise ValidationError(
            f"cannot place {num_stages} stages in {num_layers} layers"
        )
    mean = counts.mean()
    peaks = []
    for l in range(num_layers):
        left_ok = l == 0 or counts[l] > counts[l - 1]
        right_ok = l == num_layers - 1 or counts[l] > counts[l + 1]
        if left_ok and right_ok and counts[l] > mean:
            peaks.append(l)

    if not peaks:
        return LayerSelection(
            layers=tuple(_even_subdivision(num_layers, num_stages)), fallback=True
        )

    ranked = sorted(peaks, key=lambda l: (-counts[l], l))
    chosen: list[int] = []
    for peak in ranked:
        emit = peak + 1
        if emit >= num_layers:
            continue  # a shift across the last layer has no layer after it
        if all(abs(emit - c) >= min_gap for c in chosen):
            chosen.append(emit)
        if len(chosen) == num_stages:
            break
    if len(chosen) < num_stages:
        for candidate in _even_subdivision(num_layers, num_stages):
            if len(chosen) == num_stages:
                break
            if all(abs(candidate - c) >= min_gap for c in chosen):
                chosen.append(candidate)
        # last resort: any remaining depth positions, earliest first
        for candidate in range(1, num_layers):
            if len(chosen) == num_stages:
                break
            if all(abs(candidate - c) >= min_gap for c in chosen):
                chosen.append(candidate)
    if len(chosen) < num_stages:
        raise ValidationError(
            f"could not place {num_stages} layers with min_gap={min_gap} "
            f"in {num_layers} layers"
        )
    return LayerSelection(layers=tuple(sorted(chosen)), fallback=False)


def build_schedule(
    layers: Sequence[int],
    retentions: Sequence[float],
    balances: Sequence[float],
    num_layers: int,
) -> PruningSchedule:
    """Assemble a validated schedule from parallel per-stage lists."""
    if not (len(layers) == len(retentions) == len(balances)):
        raise ValidationError(
            f"per-stage lists differ in length: {len(layers)} layers, "
            f"{len(retentions)} retentions, {len(balances)} balances"
        )
    stages = tuple(
        PruningStage(layer=int(l), retention=float(r), balance=float(b))
        for l, r, b in zip(layers, retentions, balances)
    )
    return PruningSchedule(stages=stages, num_layers=num_layers)


def synthetic_shift_stack(
    rng: np.random.Generator,
    num_layers: int,
    n_image: int,
    d: int,
    shifted: Mapping[int, int],
    tau: float = DEFAULT_TAU,
    stable_cos: float = 0.999,
    shift_cos: float | None = None,
) -> np.ndarray:
    """Hidden stack [num_layers+1, n_image, d] with shifts planted by layer.

    Every token rotates by a small angle (cosine ``stable_cos`` > tau) at
    every layer; at layer l, the first ``shifted[l]`` tokens rotate by a
    large angle (cosine ``shift_cos`` < tau) instead.  Rotations happen in
    the plane spanned by the token and a random orthogonal direction, so
    consecutive cosines are exact by construction.
    """
    if d < 2:
        raise ValidationError("need d >= 2 to rotate")
    if shift_cos is None:
        shift_cos = tau - 0.05
    if not -1.0 < shift_cos < tau < stable_cos < 1.0:
        raise ValidationError(
            f"need shift_cos < tau < stable_cos, got {shift_cos}, {tau}, {stable_cos}"
        )
    for layer, count in shifted.items():
        if not 0 <= layer < num_layers:
            raise ValidationError(f"planted layer {layer} outside [0, {num_layers})")
        if not 0 <= count <= n_image:
            raise ValidationError(f"planted count {count} outside [0, {n_image}]")

    state = rng.standard_normal((n_image, d))
    state /= np.linalg.norm(state, axis=1)[:, None]
    snapshots = [state.copy()]
    for layer in range(num_layers):
        big = shifted.get(layer, 0)
        cos = np.full(n_image, stable_cos)
        cos[:big] = shift_cos
        sin = np.sqrt(1.0 - cos * cos)
        # random unit direction orthogonal to each token
        raw = rng.standard_normal((n_image, d))
        raw -= (raw * state).sum(axis=1)[:, None] * state
        raw /= np.linalg.norm(raw, axis=1)[:, None]
        state = cos[:, None] * state + sin[:, None] * raw
        state /= np.linalg.norm(state, axis=1)[:, None]
        snapshots.append(state.copy())
    return np.stack(snapshots).astype(np.float32)
