import io

import numpy as np
import pytest

from filterpot import dataset as ds
from filterpot import toycnn
from filterpot.errors import ParameterError
from filterpot.evaluate import (
    EvalConfig,
    MisclassifiedSample,
    attribution_report,
    collect_misclassified,
    finetune_sweep,
    make_ranking_providers,
    pruning_sweep,
    write_attribution_csv,
    write_report_csv,
)
from filterpot.ranking import FilterRanking
from filterpot.toycnn import ToyCnnState, filter_location, filter_metas, forward, init_state


def bad_filter_state(bad_fid=24):
    """A hand-built network that predicts class 0 because of one conv3
    filter; zeroing that filter flips the argmax to class 1."""
    zeros = init_state(0)
    state = ToyCnnState(
        conv_w=tuple(np.zeros_like(w) for w in zeros.conv_w),
        conv_b=tuple(np.zeros_like(b) for b in zeros.conv_b),
        fc_w=np.zeros((4, toycnn.FC_IN)),
        fc_b=np.zeros(4),
    )
    stage, channel = filter_location(bad_fid)
    assert stage == 2
    state.conv_b[stage][channel] = 1.0  # channel outputs constant 1
    # features are laid out channel-major: channel c occupies [4c, 4c+4)
    state.fc_w[0, 4 * channel : 4 * channel + 4] = 1.0
    state.fc_b[1] = 0.1
    return state


@pytest.fixture()
def micro_sample():
    image = np.full((1, 16, 16), 0.5)
    return MisclassifiedSample(index=0, image=image, true_label=1, predicted_label=0)


def fixed_ranking_provider(order):
    ranking = FilterRanking("pot", list(order), [float(i) for i in range(len(order))])
    return lambda image, label: ranking


class TestCollectMisclassified:
    def test_perfect_model_yields_empty_list(self, trained_state):
        train_ds = ds.make_dataset(0, "train")
        assert collect_misclassified(trained_state, train_ds) == []

    def test_zero_weight_model_ties_break_to_class_zero(self):
        zeros = init_state(0)
        state = ToyCnnState(
            conv_w=tuple(np.zeros_like(w) for w in zeros.conv_w),
            conv_b=tuple(np.zeros_like(b) for b in zeros.conv_b),
            fc_w=np.zeros((4, toycnn.FC_IN)),
            fc_b=np.zeros(4),
        )
        data = ds.make_dataset(0, "val", 40)
        mis = collect_misclassified(state, data)
        assert all(s.predicted_label == 0 for s in mis)
        assert len(mis) == int((data.labels != 0).sum())

    def test_every_entry_is_misclassified(self, trained_state, shifted_dataset, shifted_misclassified):
        assert len(shifted_misclassified) > 0
        for s in shifted_misclassified[:20]:
            _, probs = forward(trained_state, s.image)
            assert int(np.argmax(probs)) == s.predicted_label != s.true_label


class TestPruningSweep:
    def test_k0_row_is_unpruned_baseline(self, micro_sample):
        state = bad_filter_state()
        provider = fixed_ranking_provider(range(56))
        report = pruning_sweep(
            state, [micro_sample], [provider], EvalConfig("pot", max_filters=5)
        )
        _, base_probs = forward(state, micro_sample.image)
        assert report.incorrect_conf[0] == pytest.approx(float(base_probs[0]))
        assert report.frac_corrected[0] == 0.0

    def test_zeroing_bad_filter_corrects_sample(self, micro_sample):
        state = bad_filter_state(bad_fid=24)
        provider = fixed_ranking_provider([24] + [f for f in range(56) if f != 24])
        report = pruning_sweep(
            state, [micro_sample], [provider], EvalConfig("pot", max_filters=3)
        )
        assert report.frac_corrected[1] == 1.0
        assert report.incorrect_conf[1] < report.incorrect_conf[0]

    def test_max_filters_bounded(self, micro_sample):
        with pytest.raises(ParameterError):
            pruning_sweep(
                bad_filter_state(),
                [micro_sample],
                [fixed_ranking_provider(range(56))],
                EvalConfig("pot", max_filters=57),
            )

    def test_empty_set_warns_and_counts_zero(self):
        with pytest.warns(UserWarning):
            report = pruning_sweep(
                bad_filter_state(),
                [],
                [fixed_ranking_provider(range(56))],
                EvalConfig("pot", max_filters=2),
            )
        assert report.n_samples == 0

    def test_sample_order_does_not_matter(self, trained_state, shifted_misclassified, shifted_model):
        mis = shifted_misclassified[:6]
        providers = make_ranking_providers(
            "pot", trained_state, filter_metas(), model=shifted_model
        )
        cfg = EvalConfig("pot", max_filters=3)
        fwd = pruning_sweep(trained_state, mis, providers, cfg)
        rev = pruning_sweep(trained_state, list(reversed(mis)), providers, cfg)
        assert fwd.incorrect_conf == rev.incorrect_conf
        assert fwd.correct_conf == rev.correct_conf
        assert fwd.frac_corrected == rev.frac_corrected

    def test_random_method_reproducible_and_counts_seeds(self, trained_state, shifted_misclassified):
        mis = shifted_misclassified[:4]
        cfg = EvalConfig("random", max_filters=3, random_seeds=(1, 2, 3))
        providers = make_ranking_providers(
            "random", trained_state, filter_metas(), random_seeds=(1, 2, 3)
        )
        r1 = pruning_sweep(trained_state, mis, providers, cfg)
        providers2 = make_ranking_providers(
            "random", trained_state, filter_metas(), random_seeds=(1, 2, 3)
        )
        r2 = pruning_sweep(trained_state, mis, providers2, cfg)
        assert r1.n_seeds == 3
        assert r1.incorrect_conf == r2.incorrect_conf


class TestFinetuneSweep:
    def test_vanishing_lr_equals_baseline(self, micro_sample, trained_state, shifted_misclassified):
        mis = shifted_misclassified[:3]
        providers = [fixed_ranking_provider(range(56))]
        report = finetune_sweep(
            trained_state, mis, providers, EvalConfig("pot", max_filters=4, lr=1e-300)
        )
        for k in report.ks:
            assert report.incorrect_conf[k] == report.incorrect_conf[0]
            assert report.correct_conf[k] == report.correct_conf[0]

    def test_dominant_bad_filter_improves_at_k1(self, micro_sample):
        state = bad_filter_state(bad_fid=24)
        provider = fixed_ranking_provider([24] + [f for f in range(56) if f != 24])
        report = finetune_sweep(
            state, [micro_sample], [provider], EvalConfig("pot", max_filters=2, lr=0.05)
        )
        assert report.correct_conf[1] > report.correct_conf[0]

    def test_gradients_reused_across_k(self, trained_state, shifted_misclassified):
        # applying updates filter-by-filter must equal the one-shot update
        # of the top-k set computed at the original state
        sample = shifted_misclassified[0]
        order = list(range(56))
        provider = fixed_ranking_provider(order)
        report = finetune_sweep(
            trained_state,
            [sample],
            [provider],
            EvalConfig("pot", max_filters=5, lr=0.01),
        )
        from filterpot.toycnn import one_step_finetune

        direct = one_step_finetune(
            trained_state, sample.image, sample.true_label, order[:5], lr=0.01
        )
        _, probs = forward(direct, sample.image)
        assert report.correct_conf[5] == pytest.approx(float(probs[sample.true_label]), abs=1e-15)


class TestProviders:
    def test_lastgroup_orders_final_stage_first(self, trained_state, shifted_misclassified):
        filters = filter_metas()
        (provider,) = make_ranking_providers("lastgroup", trained_state, filters)
        sample = shifted_misclassified[0]
        ranking = provider(sample.image, sample.true_label)
        last_ids = {m.filter_id for m in filters if m.layer_group == "conv3"}
        assert set(ranking.filter_ids[: len(last_ids)]) == last_ids
        head_scores = ranking.scores[: len(last_ids)]
        assert head_scores == sorted(head_scores, reverse=True)

    def test_random_is_permutation(self, trained_state):
        providers = make_ranking_providers(
            "random", trained_state, filter_metas(), random_seeds=(0, 9)
        )
        for provider in providers:
            ranking = provider(None, None)
            assert sorted(ranking.filter_ids) == list(range(56))

    def test_pot_requires_model(self, trained_state):
        with pytest.raises(ParameterError):
            make_ranking_providers("pot", trained_state, filter_metas())


class TestAttributionReport:
    def test_full_k_matches_group_sizes(self, trained_state, shifted_misclassified, shifted_model):
        filters = filter_metas()
        providers = make_ranking_providers(
            "pot", trained_state, filters, model=shifted_model
        )
        shares = attribution_report(shifted_misclassified[:5], providers, 56, filters)
        assert shares["conv1"] == pytest.approx(100 * 8 / 56)
        assert shares["conv2"] == pytest.approx(100 * 16 / 56)
        assert shares["conv3"] == pytest.approx(100 * 32 / 56)

    def test_two_group_micro_case(self, micro_sample):
        filters = filter_metas()
        provider = fixed_ranking_provider(list(range(24, 56)) + list(range(24)))
        shares = attribution_report([micro_sample], [provider], 10, filters)
        assert shares["conv3"] == 100.0
        assert shares["conv1"] == 0.0


class TestCsvWriters:
    def test_report_csv_layout(self, micro_sample):
        state = bad_filter_state()
        report = pruning_sweep(
            state,
            [micro_sample],
            [fixed_ranking_provider(range(56))],
            EvalConfig("pot", max_filters=2),
        )
        buf = io.StringIO()
        write_report_csv([report], buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "method,k,incorrect_conf,correct_conf,frac_corrected,n_samples,n_seeds"
        assert len(lines) == 1 + 3  # k = 0, 1, 2
        assert lines[1].startswith("pot,0,")

    def test_attribution_csv_layout(self):
        buf = io.StringIO()
        write_attribution_csv([("pot", 20, {"conv1": 25.0, "conv2": 75.0})], buf)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "method,k,layer_group,percent"
        assert lines[1] == "pot,20,conv1,25.0"
