import unittest

import numpy as np

from neuromotor.core import TaskId
from neuromotor.errors import AnalysisError, ExcludedTaskError
from neuromotor.hmm import (
    LL_SLACK,
    HmmModel,
    brute_force_log_likelihood,
    fit_hmm,
    forward_log_likelihood,
    multi_restart_error,
    subtask_error,
    viterbi,
)
from neuromotor.synth import SynthSpec, gen_emg_trial, gen_force_trial


def _random_model(rng, n_states, n_features=2):
    return HmmModel(
        n_states=n_states,
        startprob=rng.dirichlet(np.ones(n_states)),
        transmat=rng.dirichlet(np.ones(n_states), size=n_states),
        means=rng.normal(size=(n_states, n_features)),
        covars=rng.uniform(0.5, 2.0, size=(n_states, n_features)),
    )


def _two_state_model():
    return HmmModel(
        n_states=2,
        startprob=np.array([0.5, 0.5]),
        transmat=np.array([[0.95, 0.05], [0.05, 0.95]]),
        means=np.array([[0.2, 0.3], [0.8, 0.9]]),
        covars=np.full((2, 2), 0.01),
    )


class TestSubtaskError(unittest.TestCase):
    def test_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(10000):
            n = int(rng.integers(1, 40))
            a = rng.integers(0, 2, n)
            v = rng.integers(0, 2, n)
            error = subtask_error(a, v)
            self.assertGreaterEqual(error, 0.0)
            self.assertLessEqual(error, 0.5)
            self.assertEqual(error, subtask_error(a, 1 - v))
            self.assertEqual(error, subtask_error(1 - a, v))
            hamming = float(np.mean(a != v))
            self.assertAlmostEqual(error, min(hamming, 1 - hamming), places=12)
            self.assertEqual(subtask_error(a, a), 0.0)

    def test_swapped_labels(self):
        self.assertEqual(subtask_error([0, 0, 1, 1], [1, 1, 0, 0]), 0.0)
        self.assertEqual(subtask_error([0, 0, 1, 1], [0, 1, 1, 1]), 0.25)

    def test_invalid(self):
        with self.assertRaises(AnalysisError):
            subtask_error([0, 1], [0, 1, 1])
        with self.assertRaises(AnalysisError):
            subtask_error([0, 2], [0, 1])
        with self.assertRaises(AnalysisError):
            subtask_error([], [])


class TestRecursions(unittest.TestCase):
    def test_against_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            model = _random_model(rng, 2)
            obs = rng.normal(size=(int(rng.integers(1, 13)), 2))
            loglik, best_path, best_log_prob = brute_force_log_likelihood(model, obs)
            self.assertAlmostEqual(forward_log_likelihood(model, obs), loglik, delta=1e-8)
            path = viterbi(model, obs)
            self.assertAlmostEqual(path.log_prob, best_log_prob, delta=1e-8)
            np.testing.assert_array_equal(path.states, best_path)

    def test_not_stochastic(self):
        with self.assertRaises(AnalysisError):
            HmmModel(n_states=2, startprob=np.array([0.5, 0.4]), transmat=np.eye(2),
                     means=np.zeros((2, 1)), covars=np.ones((2, 1)))
        with self.assertRaises(AnalysisError):
            HmmModel(n_states=2, startprob=np.array([0.5, 0.5]), transmat=np.full((2, 2), 0.6),
                     means=np.zeros((2, 1)), covars=np.ones((2, 1)))

    def test_viterbi_rejects_empty(self):
        with self.assertRaises(AnalysisError):
            viterbi(_two_state_model(), np.zeros((0, 2)))


class TestFit(unittest.TestCase):
    def setUp(self):
        self.model = _two_state_model()
        self.states, self.obs = self.model.sample(2000, seed=7)

    def test_recovers_states(self):
        fitted = fit_hmm(self.obs, seed=0)
        means = fitted.means[np.argsort(fitted.means[:, 0])]
        np.testing.assert_allclose(means, self.model.means, atol=0.05)
        self.assertLess(subtask_error(self.states, viterbi(fitted, self.obs).states), 0.02)

    def test_likelihood_trace(self):
        fitted = fit_hmm(self.obs, seed=3)
        trace = np.array(fitted.loglik_trace)
        self.assertGreaterEqual(np.diff(trace).min(), -LL_SLACK)
        self.assertEqual(len(trace), fitted.n_iter + 1)
        self.assertAlmostEqual(trace[-1], forward_log_likelihood(fitted, self.obs), delta=1e-6 * abs(trace[-1]))

    def test_full_covariance(self):
        fitted = fit_hmm(self.obs, seed=0, covariance_type="full")
        self.assertEqual(fitted.covars.shape, (2, 2, 2))
        np.testing.assert_allclose(fitted.transmat.sum(axis=1), 1.0)

    def test_degenerate(self):
        with self.assertRaises(AnalysisError):
            fit_hmm(np.ones((100, 3)))
        with self.assertRaises(AnalysisError):
            fit_hmm(np.zeros((3, 2)))


class TestMultiRestart(unittest.TestCase):
    def test_planar_task_excluded(self):
        trial = gen_force_trial(SynthSpec(duration=2.0), TaskId.CIRCLE_CW).trial
        with self.assertRaises(ExcludedTaskError):
            multi_restart_error(trial, n_restarts=1)

    def test_torque_and_seeds(self):
        spec = SynthSpec(duration=4.0, emg_mode="hmm")
        trial = gen_emg_trial(spec, TaskId.TORQUE).trial
        report, restarts = multi_restart_error(trial, trial.emg, n_restarts=3, base_seed=10, max_iter=50)
        self.assertEqual(report.seeds, [10, 11, 12])
        self.assertEqual(len(restarts), 3)
        self.assertTrue(all(0.0 <= error <= 0.5 for error in report.errors))
        self.assertAlmostEqual(report.mean, float(np.mean(report.errors)))
        self.assertEqual(report.n_compared, trial.game.n_samples)

    def test_decimation(self):
        spec = SynthSpec(duration=4.0, emg_mode="hmm")
        trial = gen_emg_trial(spec, TaskId.X_AXIS).trial
        report, _ = multi_restart_error(trial, trial.emg, n_restarts=1, max_iter=30, decimate=4)
        self.assertEqual(report.n_samples, len(trial.emg.timestamps[::4]))
        self.assertEqual(report.decimate, 4)


if __name__ == '__main__':
    unittest.main()
