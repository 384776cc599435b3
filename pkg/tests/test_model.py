"""Formula parsing, dataset validation, and design-row construction."""

import numpy as np
import pytest

from dtr_adhere.model import (
    Constant,
    Covariate,
    DataError,
    Dataset,
    DesignError,
    FormulaError,
    StageRecord,
    Trajectory,
    TreatmentRef,
    build_design_matrix,
    build_design_row,
    parse_feature_spec,
)


def traj(x1, x2, prescribed=(1, 1), actual=(1, 1), outcome=0.0, tid=0):
    return Trajectory(
        id=tid,
        stages=(
            StageRecord(covariates={"X": x1}, prescribed=prescribed[0], actual=actual[0]),
            StageRecord(covariates={"X": x2}, prescribed=prescribed[1], actual=actual[1]),
        ),
        outcome=outcome,
    )


class TestParser:
    def test_constant_plus_covariate(self):
        spec = parse_feature_spec("1 + X[1]")
        assert len(spec.terms) == 2
        assert spec.terms[0].factors == (Constant(),)
        assert spec.terms[1].factors == (Covariate(name="X", stage=1),)

    def test_treatment_reference(self):
        spec = parse_feature_spec("1 + X[2] + A[1]")
        assert len(spec.terms) == 3
        assert spec.terms[2].factors == (TreatmentRef(stage=1, source="actual"),)

    def test_log_and_product(self):
        spec = parse_feature_spec("1 + log(C[1]) + U[1]*A[1]")
        assert len(spec.terms) == 3
        assert spec.terms[1].factors == (Covariate(name="C", stage=1, transform="log"),)
        assert spec.terms[2].factors == (
            Covariate(name="U", stage=1),
            TreatmentRef(stage=1, source="actual"),
        )

    def test_proxy_and_expected_tokens(self):
        spec = parse_feature_spec("Astar[2] + EA[1]")
        assert spec.terms[0].factors[0].source == "proxy"
        assert spec.terms[1].factors[0].source == "expected"

    def test_syntax_error_has_position(self):
        with pytest.raises(FormulaError) as err:
            parse_feature_spec("1 + X[1] +")
        assert err.value.position == 10

    @pytest.mark.parametrize(
        "text",
        ["", "  ", "X", "X[0]", "X[1] *", "log(A[1])", "1 ++ X[1]", "X[1]]", "log(X[1]"],
    )
    def test_rejects_malformed(self, text):
        with pytest.raises(FormulaError):
            parse_feature_spec(text)

    def test_round_trip(self):
        for text in (
            "1 + X[1]",
            "1 + X[2] + A[1]",
            "1 + log(C[1]) + U[1]*A[1]",
            "Astar[2] + EA[1]*X[3]*X[3]",
            "1 + X[1]*X[1] + Astar[1]",
        ):
            spec = parse_feature_spec(text)
            assert parse_feature_spec(str(spec)) == spec

    def test_round_trip_random_specs(self):
        rng = np.random.default_rng(0)
        names = ["X", "W", "age_1"]
        for _ in range(200):
            terms = []
            for _ in range(rng.integers(1, 4)):
                factors = []
                for _ in range(rng.integers(1, 3)):
                    kind = rng.integers(0, 4)
                    stage = int(rng.integers(1, 4))
                    if kind == 0:
                        factors.append("1")
                    elif kind == 1:
                        name = names[rng.integers(0, len(names))]
                        factors.append(f"{name}[{stage}]")
                    elif kind == 2:
                        name = names[rng.integers(0, len(names))]
                        factors.append(f"log({name}[{stage}])")
                    else:
                        token = ["A", "Astar", "EA"][rng.integers(0, 3)]
                        factors.append(f"{token}[{stage}]")
                terms.append("*".join(factors))
            text = " + ".join(terms)
            spec = parse_feature_spec(text)
            assert parse_feature_spec(str(spec)) == spec

    def test_stage_validation(self):
        spec = parse_feature_spec("1 + X[3]")
        with pytest.raises(DesignError):
            spec.validate_stage(2)
        spec = parse_feature_spec("1 + A[2]")
        with pytest.raises(DesignError):
            spec.validate_stage(2)  # current-stage treatment not allowed
        spec.validate_stage(2, allow_current_treatment=True)


class TestDataset:
    def test_from_trajectories_shapes(self):
        data = Dataset.from_trajectories([traj(1.0, 2.0), traj(0.5, -1.0, tid=1)])
        assert data.n == 2
        assert data.n_stages == 2
        assert data.covariate_names == ("X",)
        np.testing.assert_allclose(data.covariate("X", 2), [2.0, -1.0])

    def test_rejects_ragged_stage_counts(self):
        t1 = traj(1.0, 2.0)
        t2 = Trajectory(id=1, stages=(StageRecord(covariates={"X": 0.0}),), outcome=1.0)
        with pytest.raises(DataError):
            Dataset.from_trajectories([t1, t2])

    def test_rejects_mismatched_covariate_names(self):
        t1 = traj(1.0, 2.0)
        t2 = Trajectory(
            id=1,
            stages=(
                StageRecord(covariates={"Z": 0.0}, prescribed=1),
                StageRecord(covariates={"Z": 0.0}, prescribed=1),
            ),
            outcome=1.0,
        )
        with pytest.raises(DataError):
            Dataset.from_trajectories([t1, t2])

    def test_rejects_nonbinary_treatment(self):
        bad = traj(1.0, 2.0, prescribed=(2, 1))
        with pytest.raises(DataError):
            Dataset.from_trajectories([bad])

    def test_rejects_nonfinite_outcome(self):
        with pytest.raises(DataError):
            Dataset.from_trajectories([traj(1.0, 2.0, outcome=np.inf)])

    def test_validation_flag_requires_actual(self):
        t = Trajectory(
            id=0,
            stages=(
                StageRecord(covariates={"X": 1.0}, prescribed=1, actual=None),
                StageRecord(covariates={"X": 1.0}, prescribed=1, actual=1),
            ),
            outcome=0.0,
        )
        flags = np.array([[True, True]])
        with pytest.raises(DataError):
            Dataset.from_trajectories([t], validation=flags)

    def test_default_validation_from_actual(self):
        t = Trajectory(
            id=0,
            stages=(
                StageRecord(covariates={"X": 1.0}, prescribed=1, actual=1),
                StageRecord(covariates={"X": 1.0}, prescribed=0, actual=None),
            ),
            outcome=0.0,
        )
        data = Dataset.from_trajectories([t])
        assert data.validation.tolist() == [[True, False]]

    def test_subset_roundtrip(self):
        data = Dataset.from_trajectories([traj(1.0, 2.0), traj(3.0, 4.0, tid=1)])
        sub = data.subset([1, 1, 0])
        np.testing.assert_allclose(sub.covariate("X", 1), [3.0, 3.0, 1.0])
        assert sub.ids == (1, 1, 0)

    def test_trajectory_view(self):
        data = Dataset.from_trajectories([traj(1.0, 2.0, prescribed=(1, 0), actual=(0, 1))])
        t = data.trajectory(0)
        assert t.stages[0].prescribed == 1
        assert t.stages[0].actual == 0
        assert t.stages[1].reported is None


class TestDesignRows:
    def test_constant_and_covariate(self):
        row = build_design_row(parse_feature_spec("1 + X[1]"), traj(2.5, 0.0), 1, "use-actual")
        np.testing.assert_allclose(row, [1.0, 2.5])

    def test_expected_substitution(self):
        spec = parse_feature_spec("1 + X[2] + A[1]")
        row = build_design_row(
            spec, traj(1.0, -0.3), 2, "use-expected", expected={1: 0.95}
        )
        np.testing.assert_allclose(row, [1.0, -0.3, 0.95])

    def test_actual_resolution(self):
        spec = parse_feature_spec("1 + X[2] + A[1]")
        row = build_design_row(spec, traj(1.0, -0.3, actual=(1, 0)), 2, "use-actual")
        np.testing.assert_allclose(row, [1.0, -0.3, 1.0])

    def test_missing_actual_raises(self):
        spec = parse_feature_spec("A[1]")
        t = traj(1.0, 2.0, actual=(None, None))
        with pytest.raises(DesignError):
            build_design_row(spec, t, 2, "use-actual")

    def test_log_of_nonpositive_raises(self):
        spec = parse_feature_spec("log(X[1])")
        with pytest.raises(DesignError):
            build_design_row(spec, traj(-1.0, 2.0), 1, "use-actual")

    def test_unknown_covariate_raises(self):
        spec = parse_feature_spec("Z[1]")
        with pytest.raises(DesignError):
            build_design_row(spec, traj(1.0, 2.0), 1, "use-actual")

    def test_missing_adherence_model_raises(self):
        spec = parse_feature_spec("EA[1]")
        with pytest.raises(DesignError):
            build_design_row(spec, traj(1.0, 2.0), 2, "use-proxy")

    def test_matrix_matches_rows_and_is_order_free(self):
        spec = parse_feature_spec("1 + X[2] + A[1]*X[1]")
        trajectories = [traj(1.0, 2.0, actual=(1, 0)), traj(-0.5, 0.25, actual=(0, 1))]
        data = Dataset.from_trajectories(trajectories)
        matrix = build_design_matrix(spec, data, 2, "use-actual")
        for i, t in enumerate(trajectories):
            row = build_design_row(spec, t, 2, "use-actual")
            np.testing.assert_allclose(matrix[i], row)
        flipped = build_design_matrix(spec, data.subset([1, 0]), 2, "use-actual")
        np.testing.assert_allclose(flipped, matrix[::-1])

    def test_modes_agree_under_perfect_adherence(self):
        spec = parse_feature_spec("1 + X[2] + A[1]")
        trajectories = [
            traj(0.3, 1.0, prescribed=(1, 0), actual=(1, 0)),
            traj(1.4, -2.0, prescribed=(0, 1), actual=(0, 1)),
        ]
        data = Dataset.from_trajectories(trajectories)
        expected = {1: data.prescribed(1), 2: data.prescribed(2)}
        m_actual = build_design_matrix(spec, data, 2, "use-actual")
        m_proxy = build_design_matrix(spec, data, 2, "use-proxy", proxy_kind="prescribed")
        m_expected = build_design_matrix(
            spec, data, 2, "use-expected", proxy_kind="prescribed", expected=expected
        )
        np.testing.assert_array_equal(m_actual, m_proxy)
        np.testing.assert_array_equal(m_actual, m_expected)

    def test_treatment_override(self):
        spec = parse_feature_spec("1 + A[1]*X[1]")
        data = Dataset.from_trajectories([traj(2.0, 1.0, actual=(0, 1))])
        forced = build_design_matrix(
            spec, data, 2, "use-actual", treatment_override={1: 1.0}
        )
        np.testing.assert_allclose(forced, [[1.0, 2.0]])
