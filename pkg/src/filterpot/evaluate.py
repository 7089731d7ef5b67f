"""Pruning and one-step fine-tuning sweeps over misclassified samples.

Every method is evaluated on the identical misclassified set. Metric
accumulation uses exactly-rounded summation, so reports are invariant to
sample order. The random baseline averages over one filter permutation per
seed; the last-group baseline orders the final conv stage by raw saliency.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import SyntheticDataset
from .errors import ParameterError
from .profiles import FilterMeta
from .ranking import FilterRanking, TailModel, group_attribution, pot_saliency, rank, zscore_saliency
from .toycnn import (
    NUM_FILTERS,
    ToyCnnState,
    apply_filter_update,
    backward,
    filter_saliency_profile,
    forward,
    zero_filters,
)

METHODS = ("pot", "zscore", "random", "lastgroup")
DEFAULT_MAX_FILTERS = 50
DEFAULT_LR = 0.001
DEFAULT_RANDOM_SEEDS = (0, 1, 2, 3, 4)

RankingProvider = Callable[[np.ndarray, int], FilterRanking]


@dataclass(frozen=True)
class EvalConfig:
    method: str
    max_filters: int = DEFAULT_MAX_FILTERS
    lr: float = DEFAULT_LR
    random_seeds: tuple[int, ...] = DEFAULT_RANDOM_SEEDS
    quantile: float = 0.90

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_filters < 1:
            raise ParameterError("max_filters must be >= 1")
        if not self.lr > 0.0:
            raise ParameterError("lr must be positive")


@dataclass(frozen=True)
class MisclassifiedSample:
    index: int
    image: np.ndarray
    true_label: int
    predicted_label: int


@dataclass
class EvalReport:
    """Mean metric curves, one entry per k = 0..max_filters. k = 0 is the
    untouched model's baseline row."""

    method: str
    ks: list[int]
    incorrect_conf: list[float]
    correct_conf: list[float]
    frac_corrected: list[float]
    n_samples: int
    n_seeds: int

    def at_k(self, k: int) -> tuple[float, float, float]:
        i = self.ks.index(k)
        return self.incorrect_conf[i], self.correct_conf[i], self.frac_corrected[i]


REPORT_CSV_HEADER = (
    "method",
    "k",
    "incorrect_conf",
    "correct_conf",
    "frac_corrected",
    "n_samples",
    "n_seeds",
)
ATTRIBUTION_CSV_HEADER = ("method", "k", "layer_group", "percent")


def collect_misclassified(state: ToyCnnState, dataset: SyntheticDataset) -> list[MisclassifiedSample]:
    """Samples whose argmax prediction differs from the true label."""
    out = []
    for i in range(len(dataset)):
        _, probs = forward(state, dataset.images[i])
        pred = int(np.argmax(probs))
        true = int(dataset.labels[i])
        if pred != true:
            out.append(MisclassifiedSample(i, dataset.images[i], true, pred))
    return out


def make_ranking_providers(
    method: str,
    state: ToyCnnState,
    filters: list[FilterMeta],
    model: TailModel | None = None,
    random_seeds: tuple[int, ...] = DEFAULT_RANDOM_SEEDS,
) -> list[RankingProvider]:
    """Providers mapping (image, true_label) -> FilterRanking.

    pot/zscore/lastgroup return a single per-sample provider; random returns
    one provider per seed, each a fixed permutation shared by all samples.
    """
    if method in ("pot", "zscore"):
        if model is None:
            raise ParameterError(f"method {method!r} requires a fitted tail model")

        def provider(image, label, _method=method):
            profile = filter_saliency_profile(state, image, label)
            if _method == "pot":
                return rank(pot_saliency(profile, model), "pot", profile)
            return rank(zscore_saliency(profile, model), "zscore", profile)

        return [provider]
    if method == "random":
        providers = []
        num = len(filters)
        for seed in random_seeds:
            ids = [int(j) for j in np.random.default_rng(int(seed)).permutation(num)]
            ranking = FilterRanking(
                method="random", filter_ids=ids, scores=[float(p) for p in range(num)]
            )
            providers.append(lambda image, label, _r=ranking: _r)
        return providers
    if method == "lastgroup":
        last_group = filters[-1].layer_group
        last_ids = [m.filter_id for m in filters if m.layer_group == last_group]
        other_ids = [m.filter_id for m in filters if m.layer_group != last_group]

        def provider(image, label):
            profile = filter_saliency_profile(state, image, label)
            ordered = sorted(last_ids, key=lambda j: (-profile[j], j)) + sorted(
                other_ids, key=lambda j: (-profile[j], j)
            )
            return FilterRanking(
                method="lastgroup",
                filter_ids=ordered,
                scores=[float(profile[j]) for j in ordered],
            )

        return [provider]
    raise ParameterError(f"method must be one of {METHODS}, got {method!r}")


class _MetricAccumulator:
    """Per-k metric lists reduced with math.fsum, so results do not depend on
    the order samples were processed in."""

    def __init__(self, max_filters: int):
        self.incorrect = [[] for _ in range(max_filters + 1)]
        self.correct = [[] for _ in range(max_filters + 1)]
        self.corrected = [[] for _ in range(max_filters + 1)]

    def add(self, k: int, probs: np.ndarray, sample: MisclassifiedSample) -> None:
        self.incorrect[k].append(float(probs[sample.predicted_label]))
        self.correct[k].append(float(probs[sample.true_label]))
        self.corrected[k].append(
            1.0 if int(np.argmax(probs)) == sample.true_label else 0.0
        )

    def report(self, method: str, n_samples: int, n_seeds: int) -> EvalReport:
        def means(rows):
            return [math.fsum(r) / len(r) if r else 0.0 for r in rows]

        return EvalReport(
            method=method,
            ks=list(range(len(self.incorrect))),
            incorrect_conf=means(self.incorrect),
            correct_conf=means(self.correct),
            frac_corrected=means(self.corrected),
            n_samples=n_samples,
            n_seeds=n_seeds,
        )


def _check_sweep_inputs(misclassified, config: EvalConfig) -> bool:
    if config.max_filters > NUM_FILTERS:
        raise ParameterError(
            f"max_filters {config.max_filters} exceeds filter count {NUM_FILTERS}"
        )
    if not misclassified:
        warnings.warn("empty misclassified set; emitting a zero-count report")
        return False
    return True


def pruning_sweep(
    state: ToyCnnState,
    misclassified: list[MisclassifiedSample],
    providers: list[RankingProvider],
    config: EvalConfig,
) -> EvalReport:
    """Zero the top-k ranked filters for k = 1..max_filters and record the
    confidence/correction metrics, averaged over samples (and providers)."""
    acc = _MetricAccumulator(config.max_filters)
    if not _check_sweep_inputs(misclassified, config):
        return acc.report(config.method, 0, len(providers))
    for sample in misclassified:
        _, base_probs = forward(state, sample.image)
        for provider in providers:
            ranking = provider(sample.image, sample.true_label)
            acc.add(0, base_probs, sample)
            pruned = state
            for k in range(1, config.max_filters + 1):
                pruned = zero_filters(pruned, [ranking.filter_ids[k - 1]])
                _, probs = forward(pruned, sample.image)
                acc.add(k, probs, sample)
    return acc.report(config.method, len(misclassified), len(providers))


def finetune_sweep(
    state: ToyCnnState,
    misclassified: list[MisclassifiedSample],
    providers: list[RankingProvider],
    config: EvalConfig,
) -> EvalReport:
    """Same protocol with one-step fine-tuning instead of zeroing. Gradients
    are computed once per sample at the input state and reused for every k,
    so growing the fine-tuned set only applies the next filter's update."""
    acc = _MetricAccumulator(config.max_filters)
    if not _check_sweep_inputs(misclassified, config):
        return acc.report(config.method, 0, len(providers))
    for sample in misclassified:
        _, base_probs = forward(state, sample.image)
        grads = backward(state, sample.image, sample.true_label)
        for provider in providers:
            ranking = provider(sample.image, sample.true_label)
            acc.add(0, base_probs, sample)
            tuned = state
            for k in range(1, config.max_filters + 1):
                tuned = apply_filter_update(
                    tuned, grads, [ranking.filter_ids[k - 1]], config.lr
                )
                _, probs = forward(tuned, sample.image)
                acc.add(k, probs, sample)
    return acc.report(config.method, len(misclassified), len(providers))


def attribution_report(
    misclassified: list[MisclassifiedSample],
    providers: list[RankingProvider],
    k: int,
    filters: list[FilterMeta],
) -> dict[str, float]:
    """Layer-group shares of the top-k slots over all per-sample rankings."""
    rankings = [
        provider(sample.image, sample.true_label)
        for sample in misclassified
        for provider in providers
    ]
    return group_attribution(rankings, k, filters)


def write_report_csv(reports: list[EvalReport], fileobj) -> None:
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(REPORT_CSV_HEADER)
    for report in reports:
        for i, k in enumerate(report.ks):
            writer.writerow(
                [
                    report.method,
                    k,
                    repr(report.incorrect_conf[i]),
                    repr(report.correct_conf[i]),
                    repr(report.frac_corrected[i]),
                    report.n_samples,
                    report.n_seeds,
                ]
            )


def write_attribution_csv(rows: list[tuple[str, int, dict[str, float]]], fileobj) -> None:
    """rows: (method, k, group->percent) triples."""
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(ATTRIBUTION_CSV_HEADER)
    for method, k, shares in rows:
        for group, percent in shares.items():
            writer.writerow([method, k, group, repr(percent)])
