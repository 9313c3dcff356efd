"""Staged image-token selection: attention quota plus diversity quota.

A stage's keep budget k is split by the stage's balance factor: the
attention share goes to positionally rebalanced top-k over importance
scores, the rest to greedy max-min dispersion over the remaining
survivors' hidden states, seeded from a spatial grid skeleton.  Both
halves operate only on tokens that survived every earlier stage, so the
per-stage survivor sets are nested by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .diversity import (
    DiversityConfig,
    greedy_maxmin,
    min_pairwise_distance,
    spatial_init,
    sum_of_distances,
)
from .errors import ValidationError
from .scoring import importance_last_token, rebalanced_topk
from .trace import (
    PruningSchedule,
    PruningStage,
    SelectionResult,
    StageSelection,
    TensorBlob,
    TokenLayout,
    TraceManifest,
    stage_kept_count,
)

# over-selection pool size for the attention quota
KPrimeRule = Callable[[int, int], int]


def default_k_prime(k: int, n: int) -> int:
    return min(2 * k, n)


@dataclass(frozen=True)
class StageInputs:
    """Everything a stage needs, restricted to the current survivors.

    ``survivors`` are original image indices in ascending order; ``scores``
    and ``hidden`` rows align with them.  Grid positions are derived from
    the original indices via the layout, so spatial structure refers to the
    full image grid no matter how many tokens remain.
    """

    layer: int
    survivors: np.ndarray
    scores: np.ndarray
    hidden: np.ndarray
    layout: TokenLayout

    def __post_init__(self) -> None:
        survivors = np.asarray(self.survivors, dtype=np.int64).reshape(-1)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        hidden = np.asarray(self.hidden)
        object.__setattr__(self, "survivors", survivors)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "hidden", hidden)
        if survivors.size == 0:
            raise ValidationError("stage has an empty survivor set")
        if np.any(np.diff(survivors) <= 0):
            raise ValidationError("survivors must be strictly ascending")
        if survivors[0] < 0 or survivors[-1] >= self.layout.n_image:
            raise ValidationError(
                f"survivor indices outside [0, {self.layout.n_image})"
            )
        if scores.size != survivors.size:
            raise ValidationError(
                f"{scores.size} scores for {survivors.size} survivors"
            )
        if hidden.ndim != 2 or hidden.shape[0] != survivors.size:
            raise ValidationError(
                f"hidden must be [{survivors.size}, d], got {hidden.shape}"
            )

    def grid_positions(self) -> np.ndarray:
        rows, cols = np.divmod(self.survivors, self.layout.grid_cols)
        return np.stack([rows, cols], axis=1)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_stage(
    inputs: StageInputs,
    stage: PruningStage,
    cfg: DiversityConfig = DiversityConfig(),
    k_prime_rule: KPrimeRule | None = None,
    final: bool = False,
) -> np.ndarray:
    """Run one pruning stage; returns kept original indices, ascending.

    The budget is k = floor(retention * survivors) (clamped to >= 1 unless
    this is a final drop-all stage).  k_att = round(balance * k) tokens come
    from rebalanced top-k over the survivor-relative score vector; the
    remaining k - k_att come from greedy max-min dispersion over the hidden
    states of survivors not already picked, seeded with the spatial grid
    skeleton of ceil(k_div / 4) cells intersected with those survivors.
    """
    if k_prime_rule is None:
        k_prime_rule = default_k_prime
    n = inputs.survivors.size
    k = stage_kept_count(stage.retention, n, final=final)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k > n:
        raise ValidationError(f"budget {k} exceeds survivor count {n}")

    k_att = min(_round_half_up(stage.balance * k), k)
    k_div = k - k_att

    if k_att > 0:
        k_prime = k_prime_rule(k_att, n)
        att_local = rebalanced_topk(inputs.scores, k_att, k_prime)
    else:
        att_local = np.empty(0, dtype=np.int64)

    if k_div > 0:
        taken = np.zeros(n, dtype=bool)
        taken[att_local] = True
        rem_local = np.flatnonzero(~taken)
        rem_orig = inputs.survivors[rem_local]
        seed_size = -(-k_div // 4)  # ceil
        cells = spatial_init(
            inputs.layout.grid_rows, inputs.layout.grid_cols, seed_size, cfg.spatial_metric
        )
        pos_of = {int(orig): i for i, orig in enumerate(rem_orig)}
        initial = [pos_of[int(c)] for c in cells if int(c) in pos_of][:k_div]
        div_rel = greedy_maxmin(
            inputs.hidden[rem_local],
            k_div,
            metric=cfg.semantic_metric,
            initial=initial,
            seed_rule=cfg.seed_rule,
        )
        div_orig = rem_orig[div_rel]
    else:
        div_orig = np.empty(0, dtype=np.int64)

    kept = np.sort(np.concatenate([inputs.survivors[att_local], div_orig]))
    return kept.astype(np.int64)


def _stage_diagnostics(
    inputs: StageInputs, stage: PruningStage, kept: np.ndarray, cfg: DiversityConfig
) -> dict[str, float]:
    pos_of = {int(orig): i for i, orig in enumerate(inputs.survivors)}
    kept_local = np.asarray([pos_of[int(i)] for i in kept], dtype=np.int64)
    total = float(inputs.scores.sum())
    kept_score = float(inputs.scores[kept_local].sum()) if kept_local.size else 0.0
    mass = kept_score / total if total > 0 else 0.0
    if kept_local.size >= 2:
        min_dist = min_pairwise_distance(inputs.hidden, kept_local, cfg.semantic_metric)
        dist_sum = sum_of_distances(inputs.hidden, kept_local, cfg.semantic_metric)
    else:
        min_dist = 0.0
        dist_sum = 0.0
    objective = stage.balance * kept_score + (1.0 - stage.balance) * dist_sum
    return {
        "kept_count": float(kept_local.size),
        "attention_mass": mass,
        "min_pairwise_distance": min_dist,
        "sum_of_distances": dist_sum,
        "objective": objective,
    }


def run_stage(
    inputs: StageInputs,
    stage: PruningStage,
    cfg: DiversityConfig = DiversityConfig(),
    k_prime_rule: KPrimeRule | None = None,
    final: bool = False,
) -> StageSelection:
    """``select_stage`` plus the per-stage diagnostics bundle."""
    kept = select_stage(inputs, stage, cfg, k_prime_rule, final=final)
    return StageSelection(
        layer=stage.layer,
        kept_indices=tuple(int(i) for i in kept),
        diagnostics=_stage_diagnostics(inputs, stage, kept, cfg),
    )


class ArrayStageProvider:
    """Stage inputs backed by per-layer score vectors and hidden matrices.

    ``scores_by_layer[l]`` is the full image-segment score vector at layer
    l and ``hidden_by_layer[l]`` the [n_image, d] hidden states; stage
    inputs are produced by slicing rows for the current survivors.
    """

    def __init__(
        self,
        layout: TokenLayout,
        scores_by_layer: Mapping[int, np.ndarray],
        hidden_by_layer: Mapping[int, np.ndarray],
    ) -> None:
        self.layout = layout
        self._scores = {int(l): np.asarray(v, dtype=np.float64) for l, v in scores_by_layer.items()}
        self._hidden = {int(l): np.asarray(v) for l, v in hidden_by_layer.items()}
        for l, vec in self._scores.items():
            if vec.shape != (layout.n_image,):
                raise ValidationError(
                    f"layer {l}: score vector shape {vec.shape} != ({layout.n_image},)"
                )
        for l, mat in self._hidden.items():
            if mat.ndim != 2 or mat.shape[0] != layout.n_image:
                raise ValidationError(
                    f"layer {l}: hidden shape {mat.shape} != ({layout.n_image}, d)"
                )

    def stage_inputs(self, layer: int, survivors: np.ndarray) -> StageInputs:
        if layer not in self._scores or layer not in self._hidden:
            raise ValidationError(f"no stage data recorded for scheduled layer {layer}")
        survivors = np.asarray(survivors, dtype=np.int64)
        return StageInputs(
            layer=layer,
            survivors=survivors,
            scores=self._scores[layer][survivors],
            hidden=self._hidden[layer][survivors],
            layout=self.layout,
        )


def trace_stage_provider(
    manifest: TraceManifest, tensors: Mapping[str, TensorBlob]
) -> ArrayStageProvider:
    """Build a provider from trace tensors named ``attn_l{i}``/``hidden_l{i}``.

    ``attn_l{i}`` is the last prompt position's attention row at layer i
    ([seq] or [heads, seq]); ``hidden_l{i}`` holds that layer's input
    hidden states for the image segment ([n_image, d], or [seq, d] from
    which the image rows are sliced).
    """
    layout = manifest.layout
    scores: dict[int, np.ndarray] = {}
    hidden: dict[int, np.ndarray] = {}
    for name, blob in tensors.items():
        if name.startswith("attn_l"):
            layer = _trailing_int(name, "attn_l")
            scores[layer] = importance_last_token(blob, layout, layer=layer).scores
        elif name.startswith("hidden_l"):
            layer = _trailing_int(name, "hidden_l")
            mat = blob.view()
            if mat.ndim != 2:
                raise ValidationError(f"tensor {name!r}: expected a matrix, got {blob.shape}")
            if mat.shape[0] == layout.total():
                mat = mat[layout.image_slice]
            elif mat.shape[0] != layout.n_image:
                raise ValidationError(
                    f"tensor {name!r}: {mat.shape[0]} rows, want n_image={layout.n_image} "
                    f"or the full sequence {layout.total()}"
                )
            hidden[layer] = mat
    return ArrayStageProvider(layout, scores, hidden)


def _trailing_int(name: str, prefix: str) -> int:
    try:
        return int(name[len(prefix):])
    except ValueError as exc:
        raise ValidationError(f"tensor name {name!r} is not {prefix}<layer>") from exc


def run_schedule(
    provider,
    schedule: PruningSchedule,
    cfg: DiversityConfig = DiversityConfig(),
    k_prime_rule: KPrimeRule | None = None,
) -> SelectionResult:
    """Run every stage of ``schedule`` against a stage-input provider.

    ``provider`` exposes ``layout`` and ``stage_inputs(layer, survivors)``;
    see ``ArrayStageProvider``.  Scores and hidden states are re-read at
    each stage layer, restricted to the tokens still alive.
    """
    survivors = np.arange(provider.layout.n_image, dtype=np.int64)
    stages = []
    last = len(schedule.stages) - 1
    for i, stage in enumerate(schedule.stages):
        inputs = provider.stage_inputs(stage.layer, survivors)
        selection = run_stage(inputs, stage, cfg, k_prime_rule, final=i == last)
        stages.append(selection)
        survivors = np.asarray(selection.kept_indices, dtype=np.int64)
        if survivors.size == 0 and i != last:
            raise ValidationError(
                f"stage at layer {stage.layer} dropped every token before the final stage"
            )
    return SelectionResult(per_stage=tuple(stages))


class ScheduleDriver:
    """Stateful prune hook for the toy transformer.

    Feed it to ``toymodel.forward``: at each scheduled layer it runs the
    stage on the live ``StageInputs`` and returns the kept indices, keeping
    everything elsewhere.  Collected selections are available afterwards
    via ``selection_result()``.
    """

    def __init__(
        self,
        schedule: PruningSchedule,
        cfg: DiversityConfig = DiversityConfig(),
        k_prime_rule: KPrimeRule | None = None,
    ) -> None:
        self.schedule = schedule
        self.cfg = cfg
        self.k_prime_rule = k_prime_rule
        self._by_layer = {stage.layer: i for i, stage in enumerate(schedule.stages)}
        self._selections: list[StageSelection] = []

    def __call__(self, inputs: StageInputs) -> np.ndarray | None:
        idx = self._by_layer.get(inputs.layer)
        if idx is None:
            return None
        stage = self.schedule.stages[idx]
        selection = run_stage(
            inputs, stage, self.cfg, self.k_prime_rule,
            final=idx == len(self.schedule.stages) - 1,
        )
        self._selections.append(selection)
        return np.asarray(selection.kept_indices, dtype=np.int64)

    def selection_result(self) -> SelectionResult:
        return SelectionResult(per_stage=tuple(self._selections))
