"""Filter rankings from the z-score baseline and from POT tail probabilities.

A TailModel bundles per-filter reference statistics with a fitted GPD tail
per filter. POT scoring gives each filter the estimated probability of
seeing a saliency profile at least as large as the observed one; smaller
means more anomalous, so POT rankings sort ascending while z-score rankings
sort descending.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientDataError, ParameterError, ShapeError
from .evt import GpdParams, fit_gpd, gpd_cdf
from .profiles import (
    DEFAULT_QUANTILE,
    FilterMeta,
    FilterStats,
    SaliencyMatrix,
    compute_stats,
    excesses_for_filter,
)

# Divisor floor for z-scores of filters whose reference std is 0.
STD_FLOOR = 1e-12

_SQRT2 = math.sqrt(2.0)

RANK_CSV_HEADER = ("rank", "filter_id", "layer_name", "layer_group", "score", "method")


@dataclass
class TailModel:
    """Per-filter reference stats + GPD tail, as persisted in tail_model.json.

    reference_sorted holds each reference column sorted ascending and is only
    populated in memory (fit_tail_model / attach_reference); the persisted
    file carries the fitted summary alone. POT scoring needs the reference
    columns for its below-threshold fallback.
    """

    quantile: float
    stats: list[FilterStats]
    params: list[GpdParams]
    degenerate: list[bool]
    reference_sorted: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_filters(self) -> int:
        return len(self.stats)

    @property
    def n_total(self) -> int:
        return self.stats[0].n_total

    def require_reference(self) -> np.ndarray:
        if self.reference_sorted is None:
            raise ParameterError(
                "tail model has no reference profiles attached; call "
                "attach_reference(model, matrix) with the matrix it was fitted on"
            )
        return self.reference_sorted


@dataclass
class FilterRanking:
    """A permutation of all filter ids with the scores that ordered it."""

    method: str
    filter_ids: list[int]
    scores: list[float]

    def top(self, k: int) -> list[int]:
        return self.filter_ids[:k]

    def __len__(self) -> int:
        return len(self.filter_ids)


def fit_tail_model(matrix: SaliencyMatrix, quantile: float = DEFAULT_QUANTILE) -> TailModel:
    """Fit stats + GPD tail for every filter column.

    Filters with fewer than 2 exceedances (or an all-equal excess sample)
    are flagged degenerate instead of failing; they carry a placeholder
    exponential tail and always score 1.0.
    """
    stats = compute_stats(matrix, quantile)
    params: list[GpdParams] = []
    degenerate: list[bool] = []
    for filter_id, st in enumerate(stats):
        excesses = excesses_for_filter(matrix, filter_id, st.threshold)
        if excesses.size >= 2:
            fitted, diag = fit_gpd(excesses)
            params.append(fitted)
            degenerate.append(diag.degenerate)
        else:
            scale = float(excesses.mean()) if excesses.size else 1.0
            params.append(GpdParams(scale=scale, shape=0.0))
            degenerate.append(True)
    model = TailModel(
        quantile=float(quantile), stats=stats, params=params, degenerate=degenerate
    )
    attach_reference(model, matrix)
    return model


def attach_reference(model: TailModel, matrix: SaliencyMatrix) -> None:
    """Attach (column-sorted) reference profiles to a loaded model."""
    if matrix.num_filters != model.num_filters:
        raise ShapeError(
            f"reference matrix has {matrix.num_filters} filters, "
            f"model has {model.num_filters}"
        )
    if matrix.num_samples != model.n_total:
        raise FormatError(
            f"reference matrix has {matrix.num_samples} samples, "
            f"model was fitted on {model.n_total}"
        )
    model.reference_sorted = np.sort(matrix.values.astype(np.float64), axis=0)


def zscore_saliency(profile, model: TailModel) -> np.ndarray:
    """Per-filter (profile - mean)/std against the reference stats."""
    p = _check_profile(profile, model.num_filters)
    means = np.array([s.mean for s in model.stats])
    stds = np.array([s.std for s in model.stats])
    return (p - means) / np.maximum(stds, STD_FLOOR)


def normal_tail_probability(z: float) -> float:
    """Standard normal survival function P(Z > z)."""
    z = float(z)
    if not math.isfinite(z):
        raise ParameterError(f"z must be finite, got {z!r}")
    return 0.5 * math.erfc(z / _SQRT2)


def pot_saliency(profile, model: TailModel) -> np.ndarray:
    """Estimated tail probability of each filter's observed profile.

    Above the filter's threshold the score is (n/N) * (1 - G(excess)) with
    the filter's fitted GPD. At or below the threshold the score falls back
    to the empirical survival estimate (1 + #{reference >= value})/(N + 1),
    which exceeds n/N and so never lets a below-threshold filter overtake an
    exceeding one. Degenerate filters score 1.0.
    """
    p = _check_profile(profile, model.num_filters)
    reference = model.require_reference()
    n_total = model.n_total
    scores = np.empty(model.num_filters)
    for j in range(model.num_filters):
        st = model.stats[j]
        if model.degenerate[j]:
            scores[j] = 1.0
        elif p[j] > st.threshold:
            tail = 1.0 - gpd_cdf(p[j] - st.threshold, model.params[j])
            scores[j] = (st.n_exceed / n_total) * tail
        else:
            count_ge = n_total - int(
                np.searchsorted(reference[:, j], p[j], side="left")
            )
            scores[j] = (1.0 + count_ge) / (n_total + 1.0)
    return scores


def rank(scores, method: str, profile) -> FilterRanking:
    """Order filters by score: descending for zscore, ascending for pot.

    Ties break toward the larger raw profile value, then the smaller
    filter_id, so rankings are reproducible.
    """
    if method not in ("zscore", "pot"):
        raise ParameterError(f"unknown ranking method {method!r}")
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise ShapeError("scores must be one-dimensional")
    if not np.all(np.isfinite(s)):
        raise ParameterError("scores contain non-finite values")
    p = _check_profile(profile, s.size)
    sign = -1.0 if method == "zscore" else 1.0
    order = sorted(range(s.size), key=lambda j: (sign * s[j], -p[j], j))
    return FilterRanking(
        method=method,
        filter_ids=[int(j) for j in order],
        scores=[float(s[j]) for j in order],
    )


def group_attribution(
    rankings: list[FilterRanking], k: int, filters: list[FilterMeta]
) -> dict[str, float]:
    """Percentage of top-k slots captured by each layer group, over all
    rankings. Groups appear in first-filter order; percentages sum to 100."""
    if not rankings:
        raise InsufficientDataError("group attribution needs at least one ranking")
    if not 1 <= k <= len(filters):
        raise ParameterError(f"k must lie in [1, {len(filters)}], got {k}")
    group_of = {m.filter_id: m.layer_group for m in filters}
    counts: dict[str, int] = {}
    for m in filters:
        counts.setdefault(m.layer_group, 0)
    for ranking in rankings:
        for filter_id in ranking.top(k):
            counts[group_of[filter_id]] += 1
    total = k * len(rankings)
    return {group: 100.0 * c / total for group, c in counts.items()}


def _check_profile(profile, expected_len: int) -> np.ndarray:
    p = np.asarray(profile, dtype=float)
    if p.shape != (expected_len,):
        raise ShapeError(f"profile must have shape ({expected_len},), got {p.shape}")
    return p


def _fmt_real(x: float) -> str:
    """Decimal with 17 significant digits: parses back to the same double."""
    return format(float(x), ".17g")


def save_tail_model(model: TailModel, path) -> Path:
    """Write tail_model.json. The writer is hand-rolled so reals always carry
    17 significant digits and repeated saves are byte-identical."""
    path = Path(path)
    lines = ["{", f'  "quantile": {_fmt_real(model.quantile)},', '  "filters": [']
    for j in range(model.num_filters):
        st = model.stats[j]
        gp = model.params[j]
        row = (
            f'    {{"filter_id": {j}, '
            f'"mean": {_fmt_real(st.mean)}, '
            f'"std": {_fmt_real(st.std)}, '
            f'"threshold": {_fmt_real(st.threshold)}, '
            f'"n_exceed": {st.n_exceed}, '
            f'"n_total": {st.n_total}, '
            f'"scale": {_fmt_real(gp.scale)}, '
            f'"shape": {_fmt_real(gp.shape)}, '
            f'"degenerate": {"true" if model.degenerate[j] else "false"}}}'
        )
        lines.append(row + ("," if j < model.num_filters - 1 else ""))
    lines += ["  ]", "}"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_tail_model(path) -> TailModel:
    """Read tail_model.json; the result has no reference profiles attached."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        quantile = float(doc["quantile"])
        records = doc["filters"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"cannot read tail model {path}: {exc}") from exc
    stats: list[FilterStats] = []
    params: list[GpdParams] = []
    degenerate: list[bool] = []
    try:
        for j, rec in enumerate(records):
            if int(rec["filter_id"]) != j:
                raise FormatError("filter_id values must be contiguous from 0")
            st = FilterStats(
                mean=float(rec["mean"]),
                std=float(rec["std"]),
                threshold=float(rec["threshold"]),
                n_exceed=int(rec["n_exceed"]),
                n_total=int(rec["n_total"]),
            )
            deg = bool(rec["degenerate"])
            if st.n_exceed < 2 and not deg:
                raise FormatError(
                    f"filter {j} has n_exceed={st.n_exceed} but is not degenerate"
                )
            stats.append(st)
            params.append(GpdParams(scale=float(rec["scale"]), shape=float(rec["shape"])))
            degenerate.append(deg)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad filter record in {path}: {exc}") from exc
    if not stats:
        raise FormatError(f"tail model {path} has no filters")
    return TailModel(quantile=quantile, stats=stats, params=params, degenerate=degenerate)


def write_ranking_csv(
    ranking: FilterRanking, filters: list[FilterMeta], fileobj, top: int | None = None
) -> None:
    """Emit the ranking as CSV (UTF-8 text stream, LF line endings)."""
    meta_by_id = {m.filter_id: m for m in filters}
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(RANK_CSV_HEADER)
    limit = len(ranking) if top is None else min(top, len(ranking))
    for position in range(limit):
        filter_id = ranking.filter_ids[position]
        meta = meta_by_id[filter_id]
        writer.writerow(
            [
                position + 1,
                filter_id,
                meta.layer_name,
                meta.layer_group,
                repr(ranking.scores[position]),
                ranking.method,
            ]
        )
