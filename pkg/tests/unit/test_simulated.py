import unittest

import numpy as np

from canvas import GridCell, GridSpec
from corpus import LocalizationTask, Pathology, ViewPosition
from masks import BinaryMask
from querier import (
    BackendAuthError,
    BackendConfig,
    BackendConfigError,
    HttpChatBackend,
    PermanentBackendError,
    TransientBackendError,
    build_prompt,
    create_backend,
)
from scorer import overlap_fractions
from simulated import (
    FixedCellBackend,
    NoisyOracleBackend,
    OracleBackend,
    ScriptedBackend,
    UniformRandomBackend,
    create_simulated_backend,
)
from stats import rng_for

SPEC = GridSpec()
FRONTAL = ViewPosition.parse("PA")


class OracleResources:
    """Every mask covers rows 64..95 and columns 160..191: cell C6 on the 8x8 grid."""

    def rendered_image(self, task):
        return task.image_id.encode()

    def overlap_grid(self, task):
        bits = np.zeros((256, 256), dtype=bool)
        bits[64:96, 160:192] = True
        return overlap_fractions(BinaryMask(bits), task.grid)


def ask(backend, task):
    return backend.complete(task, build_prompt(task), OracleResources())


def tasks(n):
    return [LocalizationTask(f"img{i:04d}", Pathology.EDEMA, FRONTAL, SPEC) for i in range(n)]


class TestSimulatedBackends(unittest.TestCase):
    def config(self, strategy, **options):
        return BackendConfig(strategy.replace("_", "-"), strategy=strategy, options=options)

    def test_factory(self):
        self.assertIsInstance(create_backend(self.config("oracle")), OracleBackend)
        self.assertIsInstance(create_backend(self.config("uniform_random")), UniformRandomBackend)
        self.assertIsInstance(
            create_backend(self.config("scripted", responses=["A1"])), ScriptedBackend
        )
        http = BackendConfig("http", kind="http_chat", endpoint="http://x.test", model="m")
        self.assertIsInstance(create_backend(http), HttpChatBackend)
        with self.assertRaises(BackendConfigError):
            create_simulated_backend(self.config("psychic"))

    def test_oracle_answers_best_cell(self):
        backend = create_simulated_backend(self.config("oracle"))
        self.assertEqual({ask(backend, t) for t in tasks(5)}, {"C6"})

    def test_uniform_random_is_seeded_per_task(self):
        first = create_simulated_backend(self.config("uniform_random"), seed=3)
        second = create_simulated_backend(self.config("uniform_random"), seed=3)
        other = create_simulated_backend(self.config("uniform_random"), seed=4)
        batch = tasks(40)

        answers = [ask(first, t) for t in batch]

        self.assertEqual(answers, [ask(second, t) for t in reversed(batch)][::-1])
        self.assertNotEqual(answers, [ask(other, t) for t in batch])
        self.assertGreater(len(set(answers)), 10)

    def test_lanes_with_the_same_seed_draw_independently(self):
        first = create_simulated_backend(BackendConfig("lane-a", strategy="uniform_random"), 3)
        second = create_simulated_backend(BackendConfig("lane-b", strategy="uniform_random"), 3)
        batch = tasks(40)

        self.assertNotEqual([ask(first, t) for t in batch], [ask(second, t) for t in batch])

    def test_seed_option_overrides_run_seed(self):
        pinned = create_simulated_backend(self.config("uniform_random", seed=11), seed=0)
        reference = create_simulated_backend(self.config("uniform_random"), seed=11)
        self.assertEqual(
            [ask(pinned, t) for t in tasks(10)], [ask(reference, t) for t in tasks(10)]
        )

    def test_uniform_draw_hit_probability(self):
        rng = rng_for(0, "uniform-draw-check")
        eligible = {GridCell(0, 0), GridCell(3, 4), GridCell(7, 7), GridCell(5, 1)}
        draws = [UniformRandomBackend.draw(SPEC, rng) for _ in range(20000)]

        share = sum(cell in eligible for cell in draws) / len(draws)

        self.assertAlmostEqual(share, len(eligible) / SPEC.cell_count, delta=0.01)

    def test_noisy_oracle_frequency(self):
        rng = rng_for(1, "noisy-draw-check")
        oracle = GridCell(2, 5)
        draws = [NoisyOracleBackend.draw(SPEC, oracle, 0.7, rng) for _ in range(10000)]

        self.assertAlmostEqual(draws.count(oracle) / len(draws), 0.7, delta=0.02)
        self.assertEqual(len({d for d in draws if d != oracle}), SPEC.cell_count - 1)

    def test_noisy_oracle_validates_probability(self):
        with self.assertRaises(BackendConfigError):
            create_simulated_backend(self.config("noisy_oracle", p_correct=1.5))
        certain = create_simulated_backend(self.config("noisy_oracle", p_correct=1.0))
        self.assertEqual({ask(certain, t) for t in tasks(20)}, {"C6"})

    def test_fixed_cell(self):
        backend = create_simulated_backend(self.config("fixed_cell", cell="h8"))
        self.assertIsInstance(backend, FixedCellBackend)
        self.assertEqual(ask(backend, tasks(1)[0]), "H8")
        with self.assertRaises(BackendConfigError):
            create_simulated_backend(self.config("fixed_cell"))


class TestScriptedBackend(unittest.TestCase):
    def test_cycles_through_responses(self):
        config = BackendConfig("scripted", strategy="scripted")
        backend = ScriptedBackend(config, ["A1", "the answer is b2"])

        answers = [ask(backend, t) for t in tasks(5)]

        self.assertEqual(answers, ["A1", "the answer is b2", "A1", "the answer is b2", "A1"])
        self.assertEqual(backend.request_count, 5)

    def test_yaml_error_entries(self):
        config = BackendConfig(
            "scripted",
            strategy="scripted",
            options={
                "responses": [
                    {"transient": "rate limited"},
                    {"permanent": "garbled"},
                    {"auth_failure": "bad key"},
                ]
            },
        )
        backend = create_simulated_backend(config)
        task = tasks(1)[0]

        for error in (TransientBackendError, PermanentBackendError, BackendAuthError):
            with self.assertRaises(error):
                ask(backend, task)

    def test_invalid_scripts(self):
        config = BackendConfig("scripted", strategy="scripted")
        with self.assertRaises(BackendConfigError):
            ScriptedBackend(config)
        with self.assertRaises(BackendConfigError):
            ScriptedBackend(config, [{"teapot": "418"}])
