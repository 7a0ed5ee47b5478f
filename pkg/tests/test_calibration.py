import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diacal.calibration import (
    INDEPENDENT_MULT,
    JOINT_MULT,
    JOINT_POWER,
    CalibrationModel,
    CalibrationTrainingSet,
    apply_calibration,
    calibration_features,
    fit_calibration,
    strategy_for,
)
from diacal.core import (
    MULTILABEL,
    POWERSET,
    PROBABILITY,
    BinaryActivityMatrix,
    ConfigurationError,
    ContractError,
    FrameScoreMatrix,
    safe_log,
    sigmoid,
)
from diacal.datagen import GeneratorConfig, SystemSpec, bayes_bce, bayes_posterior_logit, generate
from diacal.evaluation import compute_bce
from diacal.spaces import PowersetEncoding, mult_to_power, power_to_mult


def mult(values):
    values = np.asarray(values, dtype=float)
    return FrameScoreMatrix(values, PROBABILITY, MULTILABEL, values.shape[1])


def power(values):
    values = np.asarray(values, dtype=float)
    return FrameScoreMatrix(values, PROBABILITY, POWERSET, int(np.log2(values.shape[1])))


def mean_bce(p, y, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def categorical_ce(q, idx, eps=1e-7):
    return float(-np.log(np.clip(q[np.arange(len(idx)), idx], eps, 1.0)).mean())


class TestIdentityAndShape:
    def test_identity_is_exact_on_simplex(self):
        rng = np.random.default_rng(0)
        q = rng.dirichlet(np.ones(4), 500)
        q = q[(q > 1e-7).all(axis=1)]
        out = apply_calibration(CalibrationModel.identity(2), power(q))
        assert np.abs(out.values - q).max() < 1e-12

    def test_independent_has_no_exact_identity(self):
        model = CalibrationModel(INDEPENDENT_MULT, MULTILABEL, 1, np.array([1.0]), np.array([0.0]))
        out = apply_calibration(model, mult([[0.5]]))
        assert out.values[0, 0] == pytest.approx(1 / 3, abs=1e-15)

    def test_logit_feature_has_identity(self):
        model = CalibrationModel(INDEPENDENT_MULT, MULTILABEL, 2, np.ones(2), np.zeros(2), feature="logit")
        p = np.array([[0.2, 0.7], [0.01, 0.99]])
        np.testing.assert_allclose(apply_calibration(model, mult(p)).values, p, atol=1e-12)

    @given(st.floats(0.01, 10), st.floats(-5, 5), st.lists(st.floats(0, 1), min_size=2, max_size=20))
    def test_monotone_for_positive_scale(self, alpha, beta, ps):
        ps = np.sort(np.array(ps))
        ps = ps[np.concatenate([[True], np.diff(ps) > 1e-6])]
        ps = ps[(ps > 1e-6) & (ps < 1 - 1e-6)]
        model = CalibrationModel(INDEPENDENT_MULT, MULTILABEL, 1, np.array([alpha]), np.array([beta]))
        out = apply_calibration(model, mult(ps[:, None])).values[:, 0]
        assert np.all(np.diff(out) >= 0)
        # strictly increasing wherever the float result can resolve a difference
        assert np.all(np.diff(safe_log(ps)) > 0)

    def test_powerset_output_on_simplex(self):
        rng = np.random.default_rng(1)
        model = CalibrationModel(JOINT_POWER, POWERSET, 2, rng.normal(size=(4, 4)), rng.normal(size=4))
        out = apply_calibration(model, power(rng.dirichlet(np.ones(4), 50)))
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-12)

    def test_space_mismatch(self):
        with pytest.raises(ContractError):
            apply_calibration(CalibrationModel.identity(2), mult([[0.5, 0.5]]))

    def test_parameter_shapes_validated(self):
        with pytest.raises(ContractError):
            CalibrationModel(JOINT_MULT, MULTILABEL, 2, np.ones(2), np.zeros(2))
        with pytest.raises(ContractError):
            CalibrationModel(JOINT_POWER, MULTILABEL, 2, np.eye(4), np.zeros(4))

    def test_strategy_for(self):
        assert strategy_for(POWERSET, "joint") == JOINT_POWER
        assert strategy_for(MULTILABEL, "joint") == JOINT_MULT
        assert strategy_for(MULTILABEL, "independent") == INDEPENDENT_MULT
        with pytest.raises(ConfigurationError):
            strategy_for(POWERSET, "independent")

    def test_unknown_feature(self):
        with pytest.raises(ConfigurationError):
            calibration_features(np.array([[0.5]]), MULTILABEL, "probit")


class TestTrainingSet:
    def test_empty(self):
        with pytest.raises(ContractError):
            CalibrationTrainingSet(np.zeros((0, 2)), np.zeros((0, 2)), MULTILABEL, 2)
        with pytest.raises(ContractError):
            CalibrationTrainingSet.from_probabilities([], [])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            CalibrationTrainingSet(np.zeros((5, 3)), np.zeros((5, 2)), MULTILABEL, 2)
        with pytest.raises(ContractError):
            CalibrationTrainingSet(np.zeros((5, 4)), np.full(5, 4), POWERSET, 2)

    def test_strategy_space_mismatch(self):
        ts = CalibrationTrainingSet(np.zeros((5, 2)), np.zeros((5, 2)), MULTILABEL, 2)
        with pytest.raises(ContractError):
            fit_calibration(ts, JOINT_POWER)

    def test_powerset_targets_from_activity(self):
        q = power(np.full((3, 4), 0.25))
        y = np.array([[0, 0], [1, 0], [1, 1]])
        ts = CalibrationTrainingSet.from_probabilities([q], [y])
        np.testing.assert_array_equal(ts.targets, [0, 1, 3])

    def test_keep_mask(self):
        q = power(np.full((3, 4), 0.25))
        y = np.array([[0, 0], [1, 0], [1, 1]])
        ts = CalibrationTrainingSet.from_probabilities([q], [y], keep=[np.array([True, False, True])])
        np.testing.assert_array_equal(ts.targets, [0, 3])


class TestFitting:
    def test_parameter_recovery(self):
        rng = np.random.default_rng(2024)
        n = 100_000
        p = rng.uniform(0.02, 0.98, n)
        y = (rng.random(n) < sigmoid(2 * np.log(p) + 1)).astype(float)
        ts = CalibrationTrainingSet(safe_log(p)[:, None], y[:, None], MULTILABEL, 1)
        model = fit_calibration(ts, INDEPENDENT_MULT)
        assert abs(model.scale[0] - 2) < 0.05
        assert abs(model.bias[0] - 1) < 0.05

    def test_joint_power_on_true_posteriors_reaches_bayes(self):
        spec = SystemSpec("s", scale=2.0, bias=0.0, noise_sd=1.0, rho=0.0)
        cfg = GeneratorConfig(num_speakers=2, num_frames=5000, num_recordings=20, systems=(spec,),
                              p_on_given_off=0.05, p_off_given_on=0.05, seed=3)
        recs = generate(cfg)
        y = np.concatenate([r.activity.values for r in recs]).astype(float)
        z = np.concatenate([r.systems["s"].values for r in recs])
        post = sigmoid(bayes_posterior_logit(z, spec, cfg.stationary_rate))
        q = mult_to_power(mult(post))
        ts = CalibrationTrainingSet.from_probabilities([q], [y])
        model = fit_calibration(ts, JOINT_POWER)
        fitted = power_to_mult(apply_calibration(model, q)).values
        bayes, se = bayes_bce(cfg, 0)
        assert abs(mean_bce(fitted, y) - bayes) < 0.01

    def test_correlated_speakers_favour_joint_power(self):
        rng = np.random.default_rng(5)

        def sample(n):
            y1 = (rng.random(n) < 0.5).astype(float)
            y = np.stack([y1, y1], axis=1)  # perfectly correlated speakers
            z = 1.0 * (2 * y - 1) + rng.normal(size=(n, 2))
            return sigmoid(z), y

        p_tr, y_tr = sample(20_000)
        p_te, y_te = sample(20_000)
        power_model = fit_calibration(
            CalibrationTrainingSet.from_probabilities([mult_to_power(mult(p_tr))], [y_tr]), JOINT_POWER)
        indep = fit_calibration(
            CalibrationTrainingSet.from_probabilities([mult(p_tr)], [y_tr]), INDEPENDENT_MULT)
        w = power_model.scale
        off = w - np.diag(np.diag(w))
        assert np.abs(off).max() > 0.1
        bce_power = mean_bce(power_to_mult(apply_calibration(power_model, mult_to_power(mult(p_te)))).values, y_te)
        bce_indep = mean_bce(apply_calibration(indep, mult(p_te)).values, y_te)
        assert bce_power < bce_indep

    @pytest.mark.parametrize("strategy", [INDEPENDENT_MULT, JOINT_MULT])
    def test_no_worse_than_constant_predictor(self, strategy):
        rng = np.random.default_rng(6)
        y = (rng.random((3000, 2)) < [0.3, 0.7]).astype(float)
        p = np.clip(0.5 + 0.3 * (y - 0.5) + rng.normal(0, 0.2, y.shape), 0.01, 0.99)
        model = fit_calibration(CalibrationTrainingSet.from_probabilities([mult(p)], [y]), strategy)
        fitted = apply_calibration(model, mult(p)).values
        assert mean_bce(fitted, y) <= mean_bce(np.broadcast_to(y.mean(axis=0), y.shape), y)

    def test_joint_power_never_worse_than_raw(self):
        rng = np.random.default_rng(7)
        # already well calibrated inputs: the fit can only tie with the identity
        q = rng.dirichlet(np.ones(4) * 0.7, 2000)
        idx = np.array([rng.choice(4, p=row) for row in q])
        act = PowersetEncoding(2).membership[idx]
        model = fit_calibration(CalibrationTrainingSet.from_probabilities([power(q)], [act]), JOINT_POWER)
        fitted = apply_calibration(model, power(q)).values
        assert categorical_ce(fitted, idx) <= categorical_ce(q, idx) + 1e-9

    def test_independent_fits_speakers_separately(self):
        rng = np.random.default_rng(8)
        p = rng.uniform(0.05, 0.95, (4000, 2))
        y = (rng.random((4000, 2)) < p).astype(float)
        both = fit_calibration(CalibrationTrainingSet.from_probabilities([mult(p)], [y]), INDEPENDENT_MULT)
        first = fit_calibration(
            CalibrationTrainingSet.from_probabilities([mult(p[:, :1])], [y[:, :1]]), INDEPENDENT_MULT)
        assert both.scale[0] == first.scale[0] and both.bias[0] == first.bias[0]

    def test_deterministic_fit(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.05, 0.95, (2000, 2))
        y = (rng.random((2000, 2)) < p).astype(float)
        ts = CalibrationTrainingSet.from_probabilities([mult_to_power(mult(p))], [y])
        a, b = fit_calibration(ts, JOINT_POWER), fit_calibration(ts, JOINT_POWER)
        assert np.array_equal(a.scale, b.scale) and a.trained_on == b.trained_on


class TestSerialisation:
    @pytest.mark.parametrize("strategy,space,shape", [
        (INDEPENDENT_MULT, MULTILABEL, (2,)), (JOINT_MULT, MULTILABEL, (2, 2)), (JOINT_POWER, POWERSET, (4, 4)),
    ])
    def test_json_round_trip_full_precision(self, strategy, space, shape):
        rng = np.random.default_rng(10)
        d = shape[0]
        model = CalibrationModel(strategy, space, 2, rng.normal(size=shape) / 3, rng.normal(size=d) / 7,
                                 trained_on="abc")
        doc = json.loads(json.dumps(model.to_dict()))
        assert {"strategy", "space", "S", "K", "scale", "bias", "epsilon", "trained_on"} <= set(doc)
        back = CalibrationModel.from_dict(doc)
        assert np.array_equal(back.scale, model.scale) and np.array_equal(back.bias, model.bias)
        assert back.strategy == strategy and back.trained_on == "abc"

    def test_scale_is_row_major(self):
        model = CalibrationModel(JOINT_MULT, MULTILABEL, 2, np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
        assert model.to_dict()["scale"] == [1.0, 2.0, 3.0, 4.0]

    def test_malformed(self):
        with pytest.raises(ContractError):
            CalibrationModel.from_dict({"strategy": JOINT_POWER})
