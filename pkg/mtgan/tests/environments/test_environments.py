import csv
import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgan import environments as env
from mtgan import generator
from mtgan.errors import ConfigError, DivergenceError, InputError, ShapeError

small = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


class TestActionGrid(unittest.TestCase):
    def setUp(self):
        self.smsm = env.PlantSpec.build("SMSM")
        self.pac = env.PlantSpec.build("PAC")

    def test_smsm_levels(self):
        self.assertEqual(self.smsm.vocab, 5)
        self.assertEqual(float(env.detokenize(self.smsm, 2)[0]), 0.0)
        self.assertEqual(float(env.detokenize(self.smsm, 0)[0]), -1.0)
        self.assertEqual(float(env.detokenize(self.smsm, 4)[0]), 1.0)

    def test_pac_mixed_radix(self):
        self.assertEqual(self.pac.vocab, 81)
        np.testing.assert_array_equal(env.detokenize(self.pac, 80), self.pac.grid.high)
        np.testing.assert_array_equal(env.detokenize(self.pac, 0), self.pac.grid.low)
        for token in (0, 7, 40, 80):
            expected, rest = [], token
            for n in self.pac.grid.levels:
                rest, idx = divmod(rest, n)
                expected.append(self.pac.grid.values(len(expected))[idx])
            np.testing.assert_array_equal(env.detokenize(self.pac, token), expected)

    def test_equilibrium_token(self):
        self.assertEqual(env.equilibrium_token(self.pac), 40)
        np.testing.assert_array_equal(env.detokenize(self.pac, 40), self.pac.trim)
        self.assertEqual(env.equilibrium_token(self.smsm), 2)

    def test_snap_clips(self):
        self.assertEqual(env.tokenize(self.smsm, 7.0), 4)
        self.assertEqual(env.tokenize(self.smsm, -7.0), 0)
        self.assertEqual(env.tokenize(self.smsm, 0.4), 3)

    def test_out_of_range(self):
        with self.assertRaises(InputError):
            env.detokenize(self.smsm, 5)
        with self.assertRaises(InputError):
            env.detokenize(self.smsm, -1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=80))
    def test_decode_snap_round_trip(self, token):
        self.assertEqual(env.tokenize(self.pac, env.detokenize(self.pac, token)), token)


class TestStep(unittest.TestCase):
    def test_smsm_hand_step(self):
        spec = env.PlantSpec.build("SMSM")
        state, _ = env.step(spec, [0.0, 0.0], 4)
        np.testing.assert_allclose(state, [0.0004, 0.02], rtol=1e-12)

    def test_tlmdcp_upright_fixed_point(self):
        spec = env.PlantSpec.build("TLMDCP")
        zero = env.equilibrium_token(spec)
        state, r = env.step(spec, np.zeros(8), zero)
        np.testing.assert_array_equal(state, np.zeros(8))
        self.assertEqual(r, 0.0)

    def test_pac_hover_holds(self):
        spec = env.PlantSpec.build("PAC")
        state = np.zeros(6)
        for _ in range(10):
            state, r = env.step(spec, state, 40)
        np.testing.assert_array_equal(state, np.zeros(6))
        self.assertEqual(r, 0.0)

    def test_deterministic(self):
        spec = env.PlantSpec.build("TLMDCP")
        a = env.step(spec, spec.start, 5)
        b = env.step(spec, spec.start, 5)
        np.testing.assert_array_equal(a[0], b[0])
        self.assertEqual(a[1], b[1])

    def test_angles_wrap(self):
        spec = env.PlantSpec.build("PAC")
        state, _ = env.step(spec, [np.pi - 1e-9, 0.0, 0.0, 5.0, 0.0, 0.0], 40)
        self.assertLess(state[0], 0.0)
        self.assertGreater(state[0], -np.pi)

    def test_divergence(self):
        spec = env.PlantSpec.build("SMSM")
        with self.assertRaises(DivergenceError):
            env.step(spec, [2e6, 0.0], 2)

    def test_bad_state(self):
        spec = env.PlantSpec.build("SMSM")
        with self.assertRaises(ShapeError):
            env.step(spec, [0.0, 0.0, 0.0], 2)
        with self.assertRaises(InputError):
            env.step(spec, [np.nan, 0.0], 2)

    def test_wrap_angle(self):
        self.assertEqual(env.wrap_angle(np.pi), np.pi)
        self.assertEqual(env.wrap_angle(-np.pi), np.pi)
        self.assertAlmostEqual(float(env.wrap_angle(1.5 * np.pi)), -0.5 * np.pi)


class TestReward(unittest.TestCase):
    def setUp(self):
        self.spec = env.PlantSpec.build("SMSM")

    def test_maximum_at_goal(self):
        self.assertEqual(env.reward(self.spec, [0.0, 0.0], [0.0]), 0.0)

    def test_arithmetic(self):
        self.assertAlmostEqual(env.reward(self.spec, [1.0, 0.0], [1.0]), -1.1, places=12)

    def test_action_relative_to_trim(self):
        pac = env.PlantSpec.build("PAC")
        self.assertEqual(env.reward(pac, np.zeros(6), pac.trim), 0.0)

    def test_monotone_in_distance(self):
        values = [env.reward(self.spec, [d, 0.0], [0.5]) for d in (0.0, 0.5, 1.0, 2.0)]
        self.assertEqual(values, sorted(values, reverse=True))

    @settings(max_examples=60, deadline=None)
    @given(small, small, small)
    def test_never_positive(self, x, v, u):
        self.assertLessEqual(env.reward(self.spec, [x, v], [u]), 0.0)

    def test_weights_must_be_positive(self):
        with self.assertRaises(InputError):
            env.RewardWeights(0.0, 0.1)


class TestLinearize(unittest.TestCase):
    def test_smsm_closed_form(self):
        spec = env.make_task_family("SMSM", 1, np.random.default_rng(0))[0]
        dt, m = spec.dt, spec.params["mass"]
        A, B = env.linearize(spec)
        np.testing.assert_allclose(A, [[1.0, dt], [0.0, 1.0]], atol=1e-6)
        np.testing.assert_allclose(B, [[dt * dt / m], [dt / m]], atol=1e-6)

    def test_smsm_work_energy(self):
        rng = np.random.default_rng(5)
        for spec in env.make_task_family("SMSM", 4, rng):
            m, dt = spec.params["mass"], spec.dt
            self.assertEqual(dt, 0.02)
            for _ in range(25):
                state = rng.uniform(-2.0, 2.0, 2)
                token = int(rng.integers(spec.vocab))
                u = float(env.detokenize(spec, token)[0])
                nxt, _ = env.step(spec, state, token)
                gained = 0.5 * m * (nxt[1] ** 2 - state[1] ** 2)
                # force times the mean velocity over the step
                self.assertAlmostEqual(gained, u * dt * (state[1] + nxt[1]) / 2.0, delta=1e-6)
                bound = abs(u) * abs(state[1]) * dt + dt * dt * u * u / (2.0 * m)
                self.assertLessEqual(abs(gained), bound + 1e-12)

    def test_tlmdcp_upright_unstable(self):
        A, B = env.linearize(env.PlantSpec.build("TLMDCP"))
        self.assertEqual(A.shape, (8, 8))
        self.assertEqual(B.shape, (8, 1))
        self.assertGreater(float(np.abs(np.linalg.eigvals(A)).max()), 1.0)

    def test_step_size_consistency(self):
        spec = env.PlantSpec.build("TLMDCP")
        A1, B1 = env.linearize(spec, eps=1e-6)
        A2, B2 = env.linearize(spec, eps=2e-6)
        self.assertLess(float(np.abs(A1 - A2).max()), 1e-5)
        self.assertLess(float(np.abs(B1 - B2).max()), 1e-5)


class TestExperts(unittest.TestCase):
    def test_smsm_pd_reaches_goal(self):
        spec = env.PlantSpec.build("SMSM")
        seq = env.expert_rollout(spec, state0=[1.0, 0.0])
        self.assertEqual(len(seq), 150)
        self.assertEqual(seq.source, generator.EXPERT)
        traj = env.simulate(spec, seq.tokens, [1.0, 0.0])
        self.assertLess(abs(traj.states[-1][0]), 0.05)
        np.testing.assert_array_equal(traj.rewards, seq.rewards)

    def test_tokens_in_vocabulary(self):
        for kind in env.PlantKind:
            spec = env.PlantSpec.build(kind)
            seq = env.expert_rollout(spec, horizon=40, rng=np.random.default_rng(0))
            self.assertTrue(all(0 <= t < spec.vocab for t in seq.tokens))

    def test_same_seed_same_tokens(self):
        spec = env.PlantSpec.build("PAC")
        a = env.expert_rollout(spec, horizon=30, rng=np.random.default_rng(5))
        b = env.expert_rollout(spec, horizon=30, rng=np.random.default_rng(5))
        self.assertEqual(a.tokens, b.tokens)

    def test_pac_pd_holds_hover_at_goal(self):
        spec = env.PlantSpec.build("PAC")
        ctrl = env.PDController(spec)
        np.testing.assert_allclose(ctrl(np.zeros(6)), spec.trim, rtol=1e-12)
        self.assertEqual(spec.grid.snap(ctrl(np.zeros(6))), 40)

    def test_lqr_stabilizes_linearization(self):
        spec = env.PlantSpec.build("TLMDCP")
        ctrl = env.LQRController(spec)
        A, B = env.linearize(spec)
        self.assertEqual(ctrl.K.shape, (1, 8))
        self.assertLess(float(np.abs(np.linalg.eigvals(A - B @ ctrl.K)).max()), 1.0)

    def test_controller_kind_mismatch(self):
        smsm = env.PlantSpec.build("SMSM")
        with self.assertRaises(InputError):
            env.expert_rollout(smsm, env.PDController(env.PlantSpec.build("PAC")), horizon=5)
        with self.assertRaises(InputError):
            env.LQRController(smsm)
        with self.assertRaises(InputError):
            env.PDController(env.PlantSpec.build("TLMDCP"))


class TestTaskFamily(unittest.TestCase):
    def test_family_size_and_spread(self):
        family = env.make_task_family("TLMDCP", 50, np.random.default_rng(0))
        self.assertEqual(len(family), 50)
        self.assertEqual([s.task_id for s in family], list(range(50)))
        nominal = env.nominal_params("TLMDCP")
        for spec in family:
            for k, v in spec.params.items():
                self.assertTrue(0.8 * nominal[k] <= v <= 1.2 * nominal[k])

    def test_single_task(self):
        (spec,) = env.make_task_family("PAC", 1, np.random.default_rng(1))
        self.assertEqual(spec.vocab, 81)
        self.assertAlmostEqual(spec.trim[0], spec.params["mass"] * env.GRAVITY / 4.0)

    def test_same_seed_same_family(self):
        a = env.make_task_family("SMSM", 4, np.random.default_rng(2))
        b = env.make_task_family("SMSM", 4, np.random.default_rng(2))
        self.assertEqual([s.to_dict() for s in a], [s.to_dict() for s in b])

    def test_empty_family(self):
        with self.assertRaises(InputError):
            env.make_task_family("SMSM", 0, np.random.default_rng(0))

    def test_spec_dict(self):
        spec = env.make_task_family("PAC", 2, np.random.default_rng(3))[1]
        again = env.PlantSpec.from_dict(spec.to_dict())
        self.assertEqual(again.to_dict(), spec.to_dict())
        self.assertEqual(again.grid, spec.grid)

    def test_spec_validation(self):
        with self.assertRaises(InputError):
            env.PlantSpec.build("SMSM", {})
        with self.assertRaises(InputError):
            env.PlantSpec.build("SMSM", {"mass": -1.0})
        with self.assertRaises(ShapeError):
            env.PlantSpec.build("SMSM", goal=(0.0,))

    def test_family_config(self):
        fam = env.FamilySpec.from_dict({"kind": "PAC", "n_tasks": 3, "seed": 4})
        self.assertEqual(len(fam.build()), 3)
        with self.assertRaises(ConfigError) as ctx:
            env.FamilySpec.from_dict({"kind": "rocket"})
        self.assertEqual(ctx.exception.field, "environments.kind")
        with self.assertRaises(ConfigError) as ctx:
            env.FamilySpec.from_dict({"tasks": 3})
        self.assertEqual(ctx.exception.field, "environments.tasks")


class TestTrajectories(unittest.TestCase):
    def test_simulate_shapes(self):
        spec = env.PlantSpec.build("PAC")
        traj = env.simulate(spec, [40, 41, 39])
        self.assertEqual(traj.states.shape, (4, 6))
        self.assertEqual(traj.actions.shape, (3, 4))
        self.assertEqual(len(traj), 3)
        self.assertAlmostEqual(traj.total_reward, float(traj.rewards.sum()))

    def test_closed_loop_matches_replay(self):
        spec = env.PlantSpec.build("SMSM")
        ctrl = env.make_expert(spec)
        traj = env.closed_loop(spec, lambda s: spec.grid.snap(ctrl(s)), 20, [0.5, 0.0])
        replay = env.simulate(spec, traj.tokens, [0.5, 0.0])
        np.testing.assert_array_equal(traj.states, replay.states)

    def test_divergence_reports_step(self):
        spec = env.PlantSpec.build("SMSM")
        with self.assertRaises(DivergenceError) as ctx:
            env.simulate(spec, [2, 2, 2], [2e6, 0.0])
        self.assertEqual(ctx.exception.step, 0)

    def test_write_csv(self):
        spec = env.PlantSpec.build("SMSM")
        traj = env.simulate(spec, [4, 4, 2])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "traj.csv")
            env.write_trajectory_csv(path, spec, traj)
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ["step", "token", "a0", "s0", "s1", "reward"])
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[1][1], "4")


if __name__ == "__main__":
    unittest.main()
