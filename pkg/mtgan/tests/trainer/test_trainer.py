import math
import os
import tempfile
import unittest
from dataclasses import replace
from unittest import mock

import numpy as np

from mtgan import environments, shared_memory, trainer
from mtgan.errors import ConfigError, DivergenceError, InputError, SolverError
from mtgan.taskq import TaskQueue

SLOW = bool(os.environ.get("MTGAN_SLOW_TESTS"))

TINY = {
    "iterations": 2,
    "seq_len": 4,
    "d_h": 4,
    "d_emb": 3,
    "batch_size": 4,
    "n_rollouts": 2,
    "eval_horizon": 10,
    "eval_episodes": 2,
    "expert_episodes": 3,
    "windows_per_episode": 4,
    "pretrain_epochs": 2,
    "disc_pretrain_steps": 1,
    "disc_windows": [2, 3],
    "disc_kernels": 2,
    "disc_k": 3,
    "lifelong": {"stats_samples": 4, "probe_iterations": 1, "k_latent": 2},
}


def tiny(**overrides):
    return replace(trainer.TrainerConfig.from_dict(TINY), **overrides)


def family(n=2, seed=0):
    return environments.make_task_family("SMSM", n, np.random.default_rng(seed))


class TestReturns(unittest.TestCase):
    def test_discounted_return(self):
        self.assertAlmostEqual(trainer.discounted_return([1.0, 1.0, 1.0], 0.99), 2.9701, places=12)
        self.assertEqual(trainer.discounted_return([], 0.5), 0.0)
        self.assertEqual(trainer.discounted_return([2.0, 5.0], 0.0), 2.0)
        with self.assertRaises(InputError):
            trainer.discounted_return([1.0], 1.5)

    def test_error_rate(self):
        self.assertEqual(trainer.error_rate(-1.0, -1.0), 0.0)
        self.assertEqual(trainer.error_rate(-2.0, -1.0), 1.0)
        self.assertEqual(trainer.error_rate(-1.5, -1.0), 0.5)
        self.assertEqual(trainer.error_rate(-5.0, -1.0), 1.0)
        self.assertEqual(trainer.error_rate(-0.5, -1.0), 0.0)
        self.assertEqual(trainer.error_rate(0.0, 0.0), 0.0)
        self.assertEqual(trainer.error_rate(-1.0, 0.0), 1.0)

    def test_uniform_baseline_is_negative(self):
        spec = environments.PlantSpec.build("SMSM")
        self.assertLess(trainer.baseline_uniform(spec, 3, 20, 0.99, np.random.default_rng(0)), 0.0)

    def test_evaluation_shares_start_states(self):
        spec = environments.PlantSpec.build("SMSM")
        a = trainer.evaluate_expert(spec, 3, 20, 0.99, np.random.default_rng(1))
        b = trainer.evaluate_expert(spec, 3, 20, 0.99, np.random.default_rng(1), workers=2)
        self.assertEqual(a, b)
        self.assertLessEqual(a[0], a[1])

    def test_no_episodes(self):
        spec = environments.PlantSpec.build("SMSM")
        with self.assertRaises(InputError):
            trainer.baseline_uniform(spec, 0, 20, 0.99, np.random.default_rng(0))


class TestConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = trainer.TrainerConfig()
        self.assertEqual(cfg.gamma, 0.99)
        self.assertEqual(cfg.batch_size, 25)
        self.assertEqual(cfg.seq_len, 20)
        self.assertEqual(cfg.disc_windows, (2, 3, 4))
        self.assertEqual(cfg.n_rollouts, 16)
        self.assertIsInstance(cfg.lifelong, shared_memory.LifelongConfig)

    def test_dict_round_trip(self):
        cfg = tiny()
        self.assertEqual(trainer.TrainerConfig.from_dict(cfg.to_dict()), cfg)
        self.assertEqual(cfg.lifelong.stats_samples, 4)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            trainer.TrainerConfig.from_dict({"gama": 0.9})
        self.assertEqual(ctx.exception.field, "gama")

    def test_invalid_values(self):
        for key, value in (("gamma", 1.5), ("batch_size", 0), ("holdout", 1.0), ("gen_lr", 0.0)):
            with self.assertRaises(ConfigError) as ctx:
                trainer.TrainerConfig.from_dict({key: value})
            self.assertEqual(ctx.exception.field, key)

    def test_sequence_shorter_than_window(self):
        with self.assertRaises(ConfigError) as ctx:
            trainer.TrainerConfig(seq_len=3)
        self.assertEqual(ctx.exception.field, "seq_len")

    def test_trajectory_caps(self):
        cfg = trainer.TrainerConfig()
        self.assertEqual(cfg.trajectory_caps, {"SMSM": 80, "TLMDCP": 150, "PAC": 50})
        self.assertEqual(cfg.trajectory_cap(environments.PlantSpec.build("SMSM")), 80)
        self.assertEqual(cfg.trajectory_cap(environments.PlantSpec.build("PAC")), 50)
        self.assertEqual(cfg.trajectory_cap(environments.PlantSpec.build("TLMDCP")), 150)
        self.assertEqual(cfg.trajectory_cap(environments.PlantSpec.build("SMSM", horizon=30)), 30)
        lowered = trainer.TrainerConfig.from_dict({"trajectory_caps": {"PAC": 30}})
        self.assertEqual(lowered.trajectory_caps, {"SMSM": 80, "TLMDCP": 150, "PAC": 30})
        self.assertEqual(trainer.TrainerConfig.from_dict(lowered.to_dict()), lowered)

    def test_trajectory_caps_are_ceilings(self):
        for caps, seq_len, name in (({"SMSM": 81}, 20, "trajectory_caps.SMSM"),
                                    ({"PAC": 51}, 20, "trajectory_caps.PAC"),
                                    ({"PAC": 10}, 20, "trajectory_caps.PAC"),
                                    ({"CARTPOLE": 10}, 20, "trajectory_caps.CARTPOLE")):
            with self.assertRaises(ConfigError) as ctx:
                trainer.TrainerConfig(trajectory_caps=caps, seq_len=seq_len)
            self.assertEqual(ctx.exception.field, name)
        with self.assertRaises(ConfigError) as ctx:
            trainer.TrainerConfig(seq_len=60)
        self.assertEqual(ctx.exception.field, "trajectory_caps.PAC")

    def test_transfer_heads(self):
        self.assertEqual(trainer.TrainerConfig().transfer_heads, "random")
        with self.assertRaises(ConfigError) as ctx:
            trainer.TrainerConfig(transfer_heads="copied")
        self.assertEqual(ctx.exception.field, "transfer_heads")


class TestRunMetrics(unittest.TestCase):
    def sample(self):
        m = trainer.RunMetrics()
        m.append(trainer.MetricRecord(0, 0, trainer.PRETRAIN, 1.5, -1.25, 0.5, -3.0, 0.25))
        m.append(trainer.MetricRecord(1, 0, trainer.ADVERSARIAL, 0.75, -1.0, 0.625, -2.5, 0.0))
        return m

    def test_csv_round_trip(self):
        m = self.sample()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.csv")
            m.to_csv(path, comment="seed=3")
            with open(path) as fh:
                self.assertEqual(fh.readline(), "# seed=3\n")
            self.assertEqual(trainer.RunMetrics.read_csv(path), m.records)

    def test_header(self):
        self.assertEqual(self.sample().to_csv_text().splitlines()[0],
                         "iter,task_id,phase,gen_loss,disc_loss,disc_acc,avg_return,error_rate")

    def test_not_a_metrics_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "other.csv")
            with open(path, "w") as fh:
                fh.write("a,b\n1,2\n")
            with self.assertRaises(InputError):
                trainer.RunMetrics.read_csv(path)

    def test_audit(self):
        m = trainer.RunMetrics()
        m.audit(4, 4)
        m.audit(4, 3)
        self.assertEqual(m.balanced_batches, 2)
        self.assertEqual(m.balance_violations, 1)
        self.assertEqual(len(m.for_task(0)), 0)


class TestTrainer(unittest.TestCase):
    def test_rows_per_task(self):
        t = trainer.Trainer(tiny())
        metrics = t.run(family())
        self.assertEqual(len(metrics), 8)
        for task_id in (0, 1):
            rows = metrics.for_task(task_id)
            self.assertEqual([r.iter for r in rows], [0, 1, 2, 3])
            self.assertEqual([r.phase for r in rows],
                             [trainer.PRETRAIN, trainer.ADVERSARIAL, trainer.ADVERSARIAL, trainer.EVAL])
            for r in rows:
                self.assertTrue(0.0 <= r.error_rate <= 1.0)
                self.assertTrue(0.0 <= r.disc_acc <= 1.0)
                self.assertLessEqual(r.avg_return, 0.0)
        self.assertEqual(metrics.balance_violations, 0)
        self.assertEqual(metrics.balanced_batches, 2 * (1 + 2))
        self.assertEqual(sorted(t.generators), [0, 1])
        self.assertEqual(len(t.memory), 2)
        self.assertEqual([task for task, _, _ in metrics.objective], [0] * 5 + [1] * 5)

    def test_zero_iterations(self):
        metrics = trainer.Trainer(tiny(iterations=0)).run(family(1))
        self.assertEqual([(r.iter, r.phase) for r in metrics.records], [(0, trainer.PRETRAIN), (1, trainer.EVAL)])

    def test_reproducible(self):
        a = trainer.Trainer(tiny()).run(family()).to_csv_text()
        b = trainer.Trainer(tiny()).run(family()).to_csv_text()
        self.assertEqual(a, b)

    def test_worker_count_does_not_change_metrics(self):
        a = trainer.Trainer(tiny(workers=1)).run(family()).to_csv_text()
        b = trainer.Trainer(tiny(workers=2)).run(family()).to_csv_text()
        self.assertEqual(a, b)

    def test_seed_changes_metrics(self):
        a = trainer.Trainer(tiny(seed=0)).run(family(1)).to_csv_text()
        b = trainer.Trainer(tiny(seed=1)).run(family(1)).to_csv_text()
        self.assertNotEqual(a, b)

    def test_divergent_task_is_skipped(self):
        original = environments.step

        def flaky(spec, state, token):
            if spec.task_id == 1:
                raise DivergenceError("state left the admissible region")
            return original(spec, state, token)

        t = trainer.Trainer(tiny(iterations=1))
        with mock.patch.object(environments, "step", flaky):
            metrics = t.run(family(3))
        self.assertEqual(metrics.aborted, [1])
        (row,) = metrics.for_task(1)
        self.assertEqual(row.phase, trainer.ABORTED)
        self.assertEqual(row.error_rate, 1.0)
        self.assertTrue(math.isnan(row.avg_return))
        self.assertEqual(sorted(t.generators), [0, 2])
        self.assertEqual(len(metrics.for_task(2, trainer.EVAL)), 1)

    def test_failed_memory_update_is_rolled_back(self):
        original = shared_memory.update_basis

        def failing(tasks, lambda_ridge):
            if len(tasks) > 1:
                raise SolverError("singular basis system")
            return original(tasks, lambda_ridge)

        t = trainer.Trainer(tiny(iterations=1))
        with mock.patch.object(shared_memory, "update_basis", failing):
            metrics = t.run(family(2))
        self.assertEqual(metrics.aborted, [1])
        self.assertEqual(metrics.for_task(1)[-1].phase, trainer.ABORTED)
        self.assertEqual(metrics.for_task(1, trainer.EVAL), [])
        self.assertEqual(len(t.memory), 1)
        self.assertEqual(list(t.memory.stats), [0])
        self.assertEqual(list(t.memory.codes), [0])
        self.assertEqual(t.memory.used, 1)
        self.assertEqual({task for task, _, _ in metrics.objective}, {0})
        self.assertEqual(sorted(t.generators), [0])

    def test_expert_recordings_respect_caps(self):
        for overrides, expected in (({}, 80), ({"trajectory_caps": {"SMSM": 12}}, 12)):
            with mock.patch.object(environments, "expert_rollout", wraps=environments.expert_rollout) as rollout:
                trainer.Trainer(tiny(iterations=0, **overrides)).train_task(family(1)[0], task_id=0, remember=False)
            recorded = [c.kwargs["horizon"] for c in rollout.call_args_list if "rng" in c.kwargs]
            self.assertEqual(recorded, [expected] * TINY["expert_episodes"])

    def test_transfer_redraws_heads(self):
        cfg = tiny(iterations=0)
        cfg = replace(cfg, lifelong=replace(cfg.lifelong, mu_sparse=0.0))
        specs = family(2)

        def second(heads, transfer=True):
            t = trainer.Trainer(replace(cfg, transfer_heads=heads))
            t.train_task(specs[0], task_id=0)
            return t.train_task(specs[1], task_id=1, transfer=transfer, remember=False)

        redrawn, kept, plain = second("random"), second("pretrained"), second("pretrained", transfer=False)
        self.assertTrue(redrawn.transferred)
        self.assertTrue(kept.transferred)
        self.assertFalse(plain.transferred)
        np.testing.assert_array_equal(redrawn.gen.core_vector(), kept.gen.core_vector())
        head = ~plain.gen.core_mask
        np.testing.assert_array_equal(kept.gen.to_vector()[head], plain.gen.to_vector()[head])
        self.assertFalse(np.array_equal(redrawn.gen.to_vector()[head], plain.gen.to_vector()[head]))

    def test_queue_stream(self):
        q = TaskQueue()
        specs = family(2)
        q.insert(specs[0], arrival=2.0)
        q.insert(specs[1], arrival=1.0)
        t = trainer.Trainer(tiny(iterations=0))
        t.run(q)
        self.assertIs(t.specs[0], specs[1])
        self.assertIs(t.specs[1], specs[0])

    def test_empty_stream(self):
        with self.assertRaises(InputError):
            trainer.Trainer(tiny()).run([])
        with self.assertRaises(InputError):
            trainer.run(tiny(), [])

    def test_transfer_starts_from_basis(self):
        cfg = tiny(iterations=0)
        t = trainer.Trainer(replace(cfg, lifelong=replace(cfg.lifelong, mu_sparse=0.0)))
        specs = family(2)
        first = t.train_task(specs[0], task_id=0)
        self.assertFalse(first.transferred)
        second = t.train_task(specs[1], task_id=1)
        self.assertTrue(second.transferred)
        self.assertEqual(len(t.memory), 2)

    def test_cross_domain_transfer(self):
        cfg = tiny(iterations=0)
        t = trainer.Trainer(replace(cfg, lifelong=replace(cfg.lifelong, mu_sparse=0.0)))
        t.train_task(family(1)[0], task_id=0)
        pac = environments.make_task_family("PAC", 1, np.random.default_rng(0))[0]
        result = t.train_task(pac, task_id=1, remember=False)
        self.assertTrue(result.transferred)
        self.assertEqual(result.gen.vocab, 81)
        self.assertEqual(result.gen.d_core, t.memory.d_core)
        self.assertIsNone(result.stats)
        self.assertEqual(len(t.memory), 1)


class TestJumpstart(unittest.TestCase):
    def test_paired_rows(self):
        cfg = tiny(iterations=1)
        t = trainer.Trainer(cfg)
        specs = family(3)
        t.run(specs[:2])
        rows = trainer.jumpstart_comparison(cfg, t.memory, specs[2:], [0, 1])
        self.assertEqual([(r.seed, r.init) for r in rows],
                         [(0, "transfer"), (0, "random"), (1, "transfer"), (1, "random")])
        for r in rows:
            self.assertLessEqual(r.jumpstart_return, 0.0)
            self.assertLessEqual(r.final_return, 0.0)
        self.assertEqual(len(t.memory), 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "transfer.csv")
            trainer.write_jumpstart_csv(path, rows)
            with open(path) as fh:
                lines = fh.read().splitlines()
        self.assertEqual(lines[0], "seed,init,jumpstart_return,final_return")
        self.assertEqual(len(lines), 5)

    def test_no_targets(self):
        with self.assertRaises(InputError):
            trainer.jumpstart_comparison(tiny(), shared_memory.SharedMemory(), [], [0])


@unittest.skipUnless(SLOW, "full-length training runs; set MTGAN_SLOW_TESTS=1")
class TestFullRuns(unittest.TestCase):
    def test_adversarial_training_sanity(self):
        spec = environments.make_task_family("SMSM", 1, np.random.default_rng(0))[0]
        for seed in range(5):
            cfg = trainer.TrainerConfig(seed=seed, workers=4)
            metrics = trainer.Trainer(cfg).run([spec])
            self.assertEqual(metrics.aborted, [])
            acc = [r.disc_acc for r in metrics.for_task(0) if r.phase in (trainer.PRETRAIN, trainer.ADVERSARIAL)]
            peak = int(np.argmax(acc))
            self.assertGreaterEqual(acc[peak] - min(acc[peak:]), 0.1)
            final = metrics.for_task(0, trainer.EVAL)[-1].avg_return
            uniform = trainer.baseline_uniform(spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma,
                                               np.random.default_rng(seed))
            self.assertGreater(final, uniform)
            self.assertEqual(metrics.balance_violations, 0)

    def test_jumpstart_after_eight_variants(self):
        cfg = trainer.TrainerConfig(iterations=20, workers=4)
        specs = environments.make_task_family("SMSM", 9, np.random.default_rng(1))
        t = trainer.Trainer(cfg)
        t.run(specs[:8])
        self.assertEqual(len(t.memory), 8)
        short = replace(cfg, iterations=trainer.JUMPSTART_WINDOW)
        rows = trainer.jumpstart_comparison(short, t.memory, specs[8:], range(5))
        transfer = [r.jumpstart_return for r in rows if r.init == "transfer"]
        random_init = [r.jumpstart_return for r in rows if r.init == "random"]
        self.assertGreaterEqual(sum(a > b for a, b in zip(transfer, random_init)), 4)

        pac = environments.make_task_family("PAC", 1, np.random.default_rng(2))[0]
        rows = trainer.jumpstart_comparison(short, t.memory, [pac], range(5))
        for r in rows:
            if r.init != "transfer":
                continue
            uniform = trainer.baseline_uniform(pac, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma,
                                               np.random.default_rng(r.seed))
            self.assertGreaterEqual(r.jumpstart_return, uniform)


if __name__ == "__main__":
    unittest.main()
