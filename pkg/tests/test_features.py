import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phantomhaz.features import (
    DEFAULT_QUANTILE_GRID,
    EM_CATEGORY_RANGES,
    UNCATEGORIZED,
    EpisodeTable,
    QuantizerSpec,
    binarize,
    em_category,
    fit_quantizer,
    quantize_table,
    read_episode_csv,
    reconstruct,
    write_episode_csv,
)


def nearest_rank_oracle(values, p):
    """Hand-enumerated nearest-rank percentile: 1-based index ceil(p/100 * n)."""
    sv = sorted(values)
    import math

    return sv[min(max(int(math.ceil(p * len(sv) / 100.0)), 1), len(sv)) - 1]


class TestFitQuantizer:
    def test_hand_enumerated_example(self):
        values = [1, 1, 2, 5, 9, 9, 9, 20]
        spec = fit_quantizer({"f": values}, grid=(25, 50, 75, 90))
        # oracle: p25 -> 1 (the minimum, dropped), p50 -> 5, p75 -> 9, p90 -> 20
        assert nearest_rank_oracle(values, 25) == 1
        assert nearest_rank_oracle(values, 50) == 5
        assert nearest_rank_oracle(values, 75) == 9
        assert nearest_rank_oracle(values, 90) == 20
        assert spec.cutoffs["f"] == (5.0, 9.0, 20.0)

    def test_constant_feature_dropped(self):
        spec = fit_quantizer({"c": [3.0] * 10, "v": [1, 2, 3, 4]}, grid=(50,))
        assert "c" not in spec.cutoffs
        assert "v" in spec.cutoffs

    def test_median_of_strictly_increasing(self):
        values = list(range(1, 101))
        spec = fit_quantizer({"f": values}, grid=(50,))
        assert spec.cutoffs["f"] == (nearest_rank_oracle(values, 50),)
        assert spec.cutoffs["f"] == (50,)

    def test_empty_feature_raises(self):
        with pytest.raises(ValueError, match="empty"):
            fit_quantizer({"empty": []})

    def test_duplicate_cutoffs_merged(self):
        spec = fit_quantizer({"f": [0, 10, 10, 10, 10, 10, 10, 20]}, grid=(25, 50, 75))
        assert spec.cutoffs["f"] == (10.0,)

    @given(
        st.lists(st.integers(min_value=0, max_value=30), min_size=2, max_size=60),
    )
    @settings(max_examples=50, deadline=None)
    def test_matches_oracle_on_random_data(self, values):
        spec = fit_quantizer({"f": values}, grid=DEFAULT_QUANTILE_GRID)
        expected = sorted(
            {nearest_rank_oracle(values, p) for p in DEFAULT_QUANTILE_GRID}
            - {min(values)}
        )
        got = list(spec.cutoffs.get("f", ()))
        assert got == [float(v) for v in expected]


class TestBinarize:
    def test_hand_example(self):
        np.testing.assert_array_equal(binarize((5, 9, 20), 9), [1.0, 1.0, 0.0])

    def test_below_all_cutoffs(self):
        np.testing.assert_array_equal(binarize((5, 9, 20), 1), [0.0, 0.0, 0.0])

    @given(
        st.floats(min_value=-50, max_value=50),
        st.floats(min_value=-50, max_value=50),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, v1, v2):
        lo, hi = min(v1, v2), max(v1, v2)
        cuts = (-10.0, 0.0, 10.0)
        assert np.all(binarize(cuts, lo) <= binarize(cuts, hi))

    def test_no_constant_columns_over_fit_data(self):
        rng = np.random.default_rng(0)
        values = rng.integers(0, 12, size=200)
        spec = fit_quantizer({"f": values})
        for cut in spec.cutoffs.get("f", ()):
            bits = np.array([binarize((cut,), v)[0] for v in values])
            assert 0 < bits.mean() < 1

    def test_refit_on_reconstruction_is_stable(self):
        rng = np.random.default_rng(1)
        values = rng.poisson(4.0, size=500)
        spec = fit_quantizer({"f": values})
        cuts = spec.cutoffs["f"]
        recon = [
            reconstruct(cuts, binarize(cuts, v), spec.minima["f"]) for v in values
        ]
        refit = fit_quantizer({"f": recon})
        assert set(refit.cutoffs.get("f", ())) <= set(cuts)

    def test_spec_json_round_trip(self):
        spec = fit_quantizer({"a": [1, 2, 3, 9], "b": [0, 0, 5, 5]})
        back = QuantizerSpec.from_json(spec.to_json())
        assert back.cutoffs == spec.cutoffs
        assert back.grid == spec.grid


def em_oracle_table():
    """Independent restatement of the published inclusive code ranges."""
    import numpy as np

    r = {
        "office_or_outpatient": np.arange(99202, 99216),
        "hospital_observation": np.arange(99217, 99227),
        "hospital_inpatient": np.arange(99221, 99240),
        "consultation": np.arange(99241, 99256),
        "nursing_facility": np.arange(99304, 99319),
        "domicilliary": np.concatenate([np.arange(99324, 99338), [99339, 99340]]),
        "home": np.arange(99341, 99351),
        "prolonged": np.arange(99354, 99417),
        "case_management": np.arange(99366, 99369),
        "care_plan": np.arange(99374, 99381),
        "preventative_medicine": np.arange(99381, 99430),
        "care_management": np.arange(99439, 99492),
        "special_eval": np.arange(99450, 99459),
        "newborn_care": np.arange(99460, 99464),
        "cognitive": np.arange(99483, 99487),
        "behavioral": np.array([99484]),
        "psych": np.arange(99492, 99495),
        "transitional": np.arange(99495, 99497),
        "other": np.arange(99497, 99500),
    }
    return r


class TestEmCategory:
    def test_known_codes(self):
        assert em_category(99213) == "office_or_outpatient"
        assert em_category(99307) == "nursing_facility"
        assert em_category(12345) == UNCATEGORIZED

    def test_first_match_precedence_on_overlaps(self):
        # 99221-99226 sits in both hospital_observation and hospital_inpatient;
        # the observation range is printed first
        assert em_category(99221) == "hospital_observation"
        assert em_category(99227) == "hospital_inpatient"
        # prolonged (99354-99416) spans case_management and care_plan entirely
        assert em_category(99366) == "prolonged"
        assert em_category(99375) == "prolonged"
        assert em_category(99484) == "care_management"  # printed before behavioral

    def test_full_range_against_oracle(self):
        oracle = em_oracle_table()
        order = [name for name, _ in EM_CATEGORY_RANGES]
        for code in range(99202, 99500):
            expected = UNCATEGORIZED
            for name in order:
                if code in oracle[name]:
                    expected = name
                    break
            assert em_category(code) == expected, code

    def test_total_and_deterministic(self):
        for code in (0, 99201, 99500, 10**6):
            assert em_category(code) == em_category(code)
            assert isinstance(em_category(code), str)


class TestEpisodeCsv:
    def make_table(self, raw=False):
        return EpisodeTable(
            ids=["a", "b"],
            axis_names=["site", "sev"],
            kappa=[["s0", "lo"], ["s1", "hi"]],
            feature_names=["f0", "f1"],
            X=np.array([[1.0, 0.0], [0.0, 1.0]] if not raw else [[3.5, 2.0], [0.0, 7.25]]),
            interventions=[[(7.5, "case_management")], []],
            T=np.array([30.0, 12.25]),
            event=np.array([1, 0]),
            exposure=np.array([30.0, 12.25]),
            extras={"true_risk_30": np.array([0.2, 0.1])},
            raw=raw,
        )

    def test_round_trip(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "episodes.csv"
        write_episode_csv(table, path)
        back = read_episode_csv(path)
        assert back.ids == table.ids
        assert back.axis_names == table.axis_names
        assert back.kappa == table.kappa
        assert back.feature_names == table.feature_names
        np.testing.assert_array_equal(back.X, table.X)
        assert back.interventions == table.interventions
        np.testing.assert_array_equal(back.T, table.T)
        np.testing.assert_array_equal(back.event, table.event)
        np.testing.assert_array_equal(back.extras["true_risk_30"], table.extras["true_risk_30"])

    def test_hcpcs_codes_mapped_on_read(self, tmp_path):
        path = tmp_path / "eps.csv"
        path.write_text(
            "id,kappa_site,x_f0,interventions,T,event,exposure\n"
            "e1,s0,1,7.0@99213;9.0@99305,30.0,1,30.0\n"
        )
        table = read_episode_csv(path)
        assert table.interventions[0] == [
            (7.0, "office_or_outpatient"),
            (9.0, "nursing_facility"),
        ]

    def test_malformed_row_names_row_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "id,kappa_site,x_f0,interventions,T,event,exposure\n"
            "e1,s0,1,,30.0,1,30.0\n"
            "e2,s0,not_a_number,,30.0,1,30.0\n"
        )
        with pytest.raises(ValueError, match="row 3"):
            read_episode_csv(path)

    def test_quantize_table(self, tmp_path):
        table = self.make_table(raw=True)
        spec, binary = quantize_table(table, grid=(50.0,))
        assert binary.raw is False
        assert set(binary.feature_names) == set(spec.feature_names_out())
        assert np.isin(binary.X, (0.0, 1.0)).all()
        # round trip through CSV keeps everything
        path = tmp_path / "bin.csv"
        write_episode_csv(binary, path)
        back = read_episode_csv(path)
        np.testing.assert_array_equal(back.X, binary.X)
