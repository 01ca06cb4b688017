import unittest

import numpy as np
import pytest

from qerl.dqn import (
    KB_STATE_DIM,
    THRESHOLD_ACTIONS,
    DQNConfig,
    DQNController,
    PlantedThresholdTask,
    adapt_threshold,
    dqn_train_step,
    epsilon_at,
    greedy_index,
    kb_state_vector,
    select_kb_action,
)
from qerl.errors import InsufficientReplay, RangeViolation
from qerl.knowledge_store import KBAction, RetrievalParams
from qerl.rl_core import Adam, ExperienceBuffer, MLPParameters, Transition, forward

from tests.base_test_classes import BaseTestClass

CHAIN_LENGTH = 5


def one_hot(index: int) -> np.ndarray:
    state = np.zeros(CHAIN_LENGTH)
    state[index] = 1.0
    return state


class TestSchedule(BaseTestClass):
    def test_linear_decay(self) -> None:
        config = DQNConfig(epsilon_start=0.9, epsilon_end=0.1, epsilon_decay_steps=100)
        self.assertAlmostEqual(epsilon_at(0, config), 0.9)
        self.assertAlmostEqual(epsilon_at(50, config), 0.5)
        self.assertAlmostEqual(epsilon_at(100, config), 0.1)
        self.assertAlmostEqual(epsilon_at(10_000, config), 0.1)

    def test_greedy_ties_go_low(self) -> None:
        self.assertEqual(greedy_index(np.array([0.3, 0.7, 0.7])), 1)

    def test_zero_epsilon_is_greedy(self) -> None:
        qnet = MLPParameters((KB_STATE_DIM, KBAction.size()))
        qnet.biases[0][KBAction.BoostImpacts.code] = 1.0
        action = select_kb_action(np.zeros(KB_STATE_DIM), qnet, 0, np.random.default_rng(0), DQNConfig(), epsilon=0.0)
        self.assertIs(action, KBAction.BoostImpacts)


class TestTrainStep(BaseTestClass):
    def test_insufficient_replay(self) -> None:
        qnet = MLPParameters((2, 2))
        with self.assertRaises(InsufficientReplay):
            dqn_train_step(
                qnet, qnet.copy(), Adam(qnet.flat.size, 1e-3), ExperienceBuffer(10), DQNConfig(batch_size=4), 0.9,
                np.random.default_rng(0),
            )

    def test_target_sync_interval(self) -> None:
        qnet = MLPParameters.xavier((2, 4, 2), np.random.default_rng(0))
        target = qnet.copy()
        replay = ExperienceBuffer(10)
        for i in range(4):
            replay.push(Transition(np.array([1.0, float(i)]), i % 2, 1.0, np.array([0.0, 1.0])))
        config = DQNConfig(batch_size=4, target_sync_interval=3)
        optimizer = Adam(qnet.flat.size, 1e-2)
        rng = np.random.default_rng(1)
        synced = [dqn_train_step(qnet, target, optimizer, replay, config, 0.9, rng, i).synced for i in range(6)]
        self.assertEqual(synced, [False, False, True, False, False, True])
        self.assertTrue(target.identical_to(qnet))

    def test_terminal_target_is_reward(self) -> None:
        qnet = MLPParameters((1, 1))
        replay = ExperienceBuffer(4)
        replay.push(Transition(np.array([1.0]), 0, 2.0, np.array([1.0]), True))
        result = dqn_train_step(
            qnet, qnet.copy(), Adam(qnet.flat.size, 1e-3), replay, DQNConfig(batch_size=1), 0.9, np.random.default_rng(0)
        )
        self.assertAlmostEqual(result.loss, 4.0)


class TestKBStateVector(BaseTestClass):
    def test_shape_and_range(self) -> None:
        state = kb_state_vector(RetrievalParams(), mean_reward=5.0, fp_rate=1.5, hit_rate=-0.2)
        self.assertEqual(state.shape, (KB_STATE_DIM,))
        self.assertTrue(np.all((state >= 0.0) & (state <= 1.0)))
        self.assertAlmostEqual(state[0], 0.3)
        self.assertAlmostEqual(state[1], 8 / 64)
        self.assertEqual(state[8], 1.0)
        self.assertEqual(state[9], 0.0)


class TestController(BaseTestClass):
    def test_decide_observe_train(self) -> None:
        controller = DQNController(DQNConfig(batch_size=2), 0.9, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.assertFalse(controller.observe(0.0, np.zeros(KB_STATE_DIM)))
        for i in range(3):
            decision = controller.decide(np.full(KB_STATE_DIM, 0.1 * i), rng)
            self.assertEqual(decision.step, i)
            self.assertTrue(controller.observe(1.0, np.full(KB_STATE_DIM, 0.1 * (i + 1))))
        self.assertEqual(controller.steps, 3)
        self.assertEqual(len(controller.replay), 3)
        self.assertIsNotNone(controller.train(rng))
        self.assertEqual(controller.train_steps, 1)

    def test_train_waits_for_batch(self) -> None:
        controller = DQNController(DQNConfig(batch_size=8), 0.9, np.random.default_rng(0))
        self.assertIsNone(controller.train(np.random.default_rng(0)))

    def test_dict_round_trip(self) -> None:
        controller = DQNController(DQNConfig(batch_size=1), 0.9, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        controller.decide(np.zeros(KB_STATE_DIM), rng)
        controller.observe(0.5, np.ones(KB_STATE_DIM))
        controller.train(rng)
        controller.decide(np.ones(KB_STATE_DIM), rng)
        restored = DQNController.from_dict(controller.to_dict(), controller.config, 0.9)
        self.assertTrue(restored.qnet.identical_to(controller.qnet))
        self.assertTrue(restored.target_net.identical_to(controller.target_net))
        self.assertEqual((restored.steps, restored.train_steps), (2, 1))
        self.assertIsNotNone(restored.pending)
        self.assertEqual(restored.replay.ordered(), controller.replay.ordered())


def chain_step(position: int, action: int) -> int:
    if action == 1:
        return min(position + 1, CHAIN_LENGTH - 1)
    return max(position - 1, 0)


def chain_value_iteration(gamma: float, sweeps: int = 200) -> np.ndarray:
    """Exact Q* of the chain: reaching the last state pays 1 and ends the episode."""
    q_star = np.zeros((CHAIN_LENGTH, 2))
    for _ in range(sweeps):
        values = q_star.max(axis=1)
        values[CHAIN_LENGTH - 1] = 0.0
        for position in range(CHAIN_LENGTH - 1):
            for action in (0, 1):
                after = chain_step(position, action)
                done = after == CHAIN_LENGTH - 1
                q_star[position, action] = 1.0 if done else gamma * values[after]
    return q_star


class TestChainMDP(BaseTestClass):
    """Walk along a 5-state chain; reaching the last state pays 1 and ends the episode."""

    GAMMA = 0.8

    def _train(self, total_steps: int) -> DQNController:
        config = DQNConfig(
            replay_capacity=10_000,
            batch_size=64,
            target_sync_interval=200,
            epsilon_start=1.0,
            epsilon_end=0.5,
            epsilon_decay_steps=5_000,
            learning_rate=1e-3,
        )
        controller = DQNController(config, self.GAMMA, np.random.default_rng(0), state_dim=CHAIN_LENGTH, n_actions=2)
        rng = np.random.default_rng(1)
        while controller.steps < total_steps:
            if controller.steps >= total_steps // 2:
                controller.optimizer.learning_rate = 1e-4
            position = int(rng.integers(CHAIN_LENGTH - 1))
            for _ in range(30):
                controller.decide(one_hot(position), rng)
                assert controller.pending is not None
                position = chain_step(position, controller.pending[1])
                done = position == CHAIN_LENGTH - 1
                controller.observe(1.0 if done else 0.0, one_hot(position), done)
                controller.train(rng)
                if done or controller.steps >= total_steps:
                    break
        return controller

    def test_value_iteration_reference(self) -> None:
        q_star = chain_value_iteration(self.GAMMA)
        self.assertArrayAlmostEqual(q_star[:, 1][:-1], [0.512, 0.64, 0.8, 1.0])
        self.assertAlmostEqual(q_star[0, 0], 0.8**4)
        self.assertAlmostEqual(q_star[3, 0], 0.64)

    @pytest.mark.slow
    def test_learned_q_matches_value_iteration(self) -> None:
        controller = self._train(20_000)
        self.assertLessEqual(controller.train_steps, 50_000)
        q_star = chain_value_iteration(self.GAMMA)
        for position in range(CHAIN_LENGTH - 1):
            q_values = forward(controller.qnet, one_hot(position))
            self.assertEqual(greedy_index(q_values), 1, f"state {position}")
            for action in (0, 1):
                expected = q_star[position, action]
                self.assertLess(
                    abs(q_values[action] - expected) / abs(expected), 0.05, f"state {position} action {action}"
                )


if __name__ == "__main__":
    unittest.main()


class TestPlantedThreshold(BaseTestClass):
    def test_quality_peaks_at_optimum(self) -> None:
        task = PlantedThresholdTask(optimum=0.6)
        task.store.params = RetrievalParams(similarity_threshold=0.6, top_k=64)
        self.assertEqual(task.quality(), (1.0, 1.0))
        self.assertAlmostEqual(task.reward(), 1.0)
        peak = task.reward()
        for off_peak in (0.3, 0.56, 0.64, 0.8):
            task.store.params = RetrievalParams(similarity_threshold=off_peak, top_k=64)
            self.assertLess(task.reward(), peak)

    def test_default_start_is_below_optimum(self) -> None:
        task = PlantedThresholdTask(optimum=0.6)
        self.assertAlmostEqual(task.threshold, 0.3)
        precision, recall = task.quality()
        self.assertEqual(recall, 1.0)
        self.assertLess(precision, 1.0)

    def test_step_moves_threshold(self) -> None:
        task = PlantedThresholdTask()
        task.step(KBAction.RaiseThreshold)
        self.assertAlmostEqual(task.threshold, 0.32)
        task.step(KBAction.NoOp)
        self.assertAlmostEqual(task.threshold, 0.32)
        self.assertEqual(task.state().shape, (KB_STATE_DIM,))

    def test_optimum_must_leave_room(self) -> None:
        with self.assertRaises(RangeViolation):
            PlantedThresholdTask(optimum=0.99)

    def test_controller_maps_outputs_to_given_actions(self) -> None:
        controller = DQNController(DQNConfig(), 0.5, np.random.default_rng(0), actions=THRESHOLD_ACTIONS)
        self.assertEqual(controller.qnet.sizes[-1], len(THRESHOLD_ACTIONS))
        for step in range(20):
            decision = controller.decide(np.zeros(KB_STATE_DIM), np.random.default_rng(step))
            self.assertIn(decision.action, THRESHOLD_ACTIONS)

    def test_short_run_records_every_action(self) -> None:
        result = adapt_threshold(0, kb_actions=10)
        self.assertEqual(result.kb_actions, 10)
        self.assertEqual(len(result.thresholds), 10)
        self.assertEqual(result.to_dict()["kb_actions"], 10)

    def test_runs_are_reproducible(self) -> None:
        self.assertEqual(adapt_threshold(4, kb_actions=30).thresholds, adapt_threshold(4, kb_actions=30).thresholds)

    @pytest.mark.slow
    def test_threshold_reaches_planted_optimum(self) -> None:
        for seed in range(3):
            result = adapt_threshold(seed, PlantedThresholdTask(optimum=0.6), kb_actions=200)
            self.assertLessEqual(result.kb_actions, 200)
            self.assertLessEqual(result.error, 0.05 + 1e-9, msg=f"seed {seed} ended at {result.final_threshold}")
