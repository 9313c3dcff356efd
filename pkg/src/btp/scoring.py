"""Attention-derived importance scores and position-rebalanced top-k.

Importance of an image token is the attention it receives from prompt text,
read off softmaxed attention rows.  Three estimators are provided: the last
prompt position's row, the mean over all text rows, and a mean over the
text rows most similar to the image content.  Scores feed the rebalanced
top-k selector, which counteracts the positional skew of causal attention
(late image tokens absorb more attention mass than early ones).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .trace import TensorBlob, TokenLayout


@dataclass(frozen=True)
class ImportanceScores:
    """Per-image-token importance at one decoder layer."""

    layer: int
    scores: np.ndarray
    method: str

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "scores", scores)
        if scores.size == 0:
            raise ValidationError("importance scores must be non-empty")
        if np.any(scores < 0):
            raise ValidationError("importance scores must be non-negative")


def _as_array(x) -> np.ndarray:
    if isinstance(x, TensorBlob):
        return x.view()
    return np.asarray(x)


def _check_attention_rows(rows: np.ndarray, layout: TokenLayout, what: str) -> np.ndarray:
    """Validate softmaxed attention rows over the full sequence.

    Accepts [seq] or [heads, seq] for a single row and [m, seq] for a row
    batch; head axes are averaged away by the callers before this point.
    """
    if rows.shape[-1] != layout.total():
        raise ValidationError(
            f"{what}: row length {rows.shape[-1]} != sequence length {layout.total()}"
        )
    if np.any(rows < 0):
        raise ValidationError(f"{what}: negative entries, expected softmaxed rows")
    return rows.astype(np.float64)


def importance_last_token(attn_row, layout: TokenLayout, layer: int = 0) -> ImportanceScores:
    """Importance from the last prompt position's attention row.

    ``attn_row`` is that position's softmaxed attention over the whole
    sequence, either head-averaged ([seq]) or per-head ([heads, seq]); a
    per-head input is averaged over heads here.  "Last" means the final
    prompt position regardless of segment, since generation is conditioned
    on exactly that position's state.
    """
    row = _as_array(attn_row)
    if row.ndim == 2:
        row = row.mean(axis=0)
    elif row.ndim != 1:
        raise ValidationError(f"attention row must be 1-D or [heads, seq], got {row.shape}")
    row = _check_attention_rows(row, layout, "last-token attention row")
    return ImportanceScores(layer=layer, scores=row[layout.image_slice], method="last_token")


def importance_averaged(attn_rows, layout: TokenLayout, layer: int = 0) -> ImportanceScores:
    """Importance as the mean attention over a batch of prompt rows."""
    rows = _as_array(attn_rows)
    if rows.ndim != 2:
        raise ValidationError(f"attention rows must be [m, seq], got {rows.shape}")
    if rows.shape[0] == 0:
        raise ValidationError("attention row batch is empty")
    rows = _check_attention_rows(rows, layout, "attention rows")
    return ImportanceScores(
        layer=layer, scores=rows.mean(axis=0)[layout.image_slice], method="averaged_tokens"
    )


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValidationError(f"{what}: zero-norm hidden state at index {bad[0]}")
    return x / norms[:, None]


def importance_similarity(
    text_hidden,
    image_hidden,
    attn_rows,
    layout: TokenLayout,
    top_t: int,
    layer: int = 0,
) -> ImportanceScores:
    """Importance from the text rows most similar to the image.

    Each text token is scored by its maximum cosine similarity to any image
    token; the attention rows of the ``top_t`` best-matching text tokens
    (ties broken toward the lower text index) are averaged over the image
    slice.  ``top_t`` equal to the number of text rows reduces this to
    ``importance_averaged``.
    """
    text = _as_array(text_hidden).astype(np.float64)
    image = _as_array(image_hidden).astype(np.float64)
    rows = _as_array(attn_rows)
    if text.ndim != 2 or image.ndim != 2 or text.shape[1] != image.shape[1]:
        raise ValidationError(
            f"hidden states must share the feature axis, got {text.shape} and {image.shape}"
        )
    if rows.ndim != 2 or rows.shape[0] != text.shape[0]:
        raise ValidationError(
            f"attention rows [{rows.shape}] must align with {text.shape[0]} text tokens"
        )
    if not 1 <= top_t <= text.shape[0]:
        raise ValidationError(f"top_t must be in [1, {text.shape[0]}], got {top_t}")
    rows = _check_attention_rows(rows, layout, "text attention rows")

    sims = _unit_rows(text, "text hidden states") @ _unit_rows(image, "image hidden states").T
    best = sims.max(axis=1)
    # descending similarity, lower text index wins ties
    order = np.lexsort((np.arange(best.size), -best))
    picked = rows[order[:top_t]]
    return ImportanceScores(
        layer=layer, scores=picked.mean(axis=0)[layout.image_slice], method="similarity_based"
    )


def _scores_vector(scores) -> np.ndarray:
    if isinstance(scores, ImportanceScores):
        return scores.scores
    vec = np.asarray(scores, dtype=np.float64).reshape(-1)
    if vec.size == 0:
        raise ValidationError("score vector is empty")
    return vec


def rebalanced_topk(scores, k: int, k_prime: int | None = None) -> np.ndarray:
    """Positionally rebalanced top-k over a score vector of length N.

    An over-selected pool of the ``k_prime`` highest scores (descending,
    lower index on ties) is split at position floor(N/2): pool members from
    the early half are taken first, then pool members from the late half
    fill the remaining budget, preserving pool (score) order.  If the early
    half alone covers the budget the result is its first k members.  With
    ``k_prime == k`` this is a plain top-k as a set.  Default
    ``k_prime = min(2k, N)``.
    """
    vec = _scores_vector(scores)
    n = vec.size
    if not 0 < k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    if k_prime is None:
        k_prime = min(2 * k, n)
    if not k <= k_prime <= n:
        raise ValidationError(f"k_prime must be in [{k}, {n}], got {k_prime}")

    order = np.lexsort((np.arange(n), -vec))
    pool = order[:k_prime]
    split = n // 2
    pre = pool[pool < split]
    if pre.size >= k:
        return pre[:k].astype(np.int64)
    post = pool[pool >= split]
    return np.concatenate([pre, post[: k - pre.size]]).astype(np.int64)


def attention_mass_ratio(scores, k: int) -> float:
    """Fraction of total attention mass captured by the k highest scores."""
    vec = _scores_vector(scores)
    if not 0 <= k <= vec.size:
        raise ValidationError(f"k must be in [0, {vec.size}], got {k}")
    total = float(vec.sum())
    if total <= 0:
        raise ValidationError("attention mass ratio undefined for all-zero scores")
    top = np.sort(vec)[::-1][:k]
    return float(top.sum()) / total


def value_norm_dispersion(values) -> float:
    """Coefficient of variation (population std / mean) of value-row norms.

    Near zero means pruning error is governed by attention weights alone;
    large values warn that a low-attention, high-norm row can matter.
    """
    mat = _as_array(values).astype(np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValidationError(f"values must be [N>=2, d], got {mat.shape}")
    norms = np.linalg.norm(mat, axis=1)
    mean = norms.mean()
    if mean == 0:
        raise ValidationError("value rows are all zero")
    return float(norms.std(ddof=0) / mean)
