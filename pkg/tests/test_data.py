import numpy as np
import pytest

from fedhyp.data import (
    DRONE_REMAP,
    Agent,
    PrivacyError,
    Scenario,
    WorldConfig,
    _allocate,
    clients_to_dataset,
    dataset_to_clients,
    domain_specs,
    gen_source,
    gen_target,
    gen_test,
    load_dataset,
    save_dataset,
    scenario_config,
    sunlit_score,
)
from fedhyp.config import RunConfig
from fedhyp.metrics import class_remap
from fedhyp.model import WEATHERS, Weather
from fedhyp.server import build_environment, predict_dataset, pretrain

WORLD = WorldConfig()


@pytest.fixture(scope="module")
def specs():
    return domain_specs(WORLD, "source"), domain_specs(WORLD, "target")


class TestSpecs:
    def test_all_pairs_present(self, specs):
        for s in specs:
            assert set(s) == {(a, w) for a in Agent for w in WEATHERS}

    def test_unknown_domain(self):
        with pytest.raises(ValueError):
            domain_specs(WORLD, "other")

    def test_target_shifted_from_source(self, specs):
        src, tgt = specs
        key = (Agent.CAR, Weather.NIGHT)
        assert np.linalg.norm(tgt[key].offset - src[key].offset) > 1.0

    def test_drone_classes_subset(self, specs):
        src, _ = specs
        assert src[(Agent.DRONE, Weather.CLEAR)].class_prior.shape == (WORLD.n_drone_classes,)

    def test_cue_channels(self):
        assert WORLD.cue_channels == (6, 7)


class TestGenerators:
    def test_source_balanced_weathers(self, specs):
        ds = gen_source(specs[0], 40, 0, WORLD)
        assert len(ds) == 80
        for a in Agent:
            assert np.bincount(ds.weather[ds.agent == a], minlength=4).tolist() == [10, 10, 10, 10]

    def test_labels_in_range(self, specs):
        ds = gen_source(specs[0], 20, 0, WORLD)
        car = ds.labels[ds.agent == Agent.CAR]
        drone = ds.labels[ds.agent == Agent.DRONE]
        assert car.max() < WORLD.n_car_classes
        assert drone.max() < WORLD.n_drone_classes
        assert ds.features.shape[1:] == (WORLD.grid, WORLD.grid, WORLD.in_dim)

    def test_deterministic(self, specs):
        a = gen_source(specs[0], 10, 3, WORLD)
        b = gen_source(specs[0], 10, 3, WORLD)
        np.testing.assert_array_equal(a.features, b.features)

    def test_test_split_sizes(self, specs):
        ds = gen_test(specs[1], {Agent.CAR: (4, 2, 2, 2), Agent.DRONE: (1, 1, 1, 1)}, 0, WORLD)
        assert len(ds.select(Agent.CAR)) == 10
        assert len(ds.select(Agent.DRONE, Weather.FOG)) == 1

    def test_allocate_sums(self):
        counts = _allocate(71, np.array([0.55, 0.2, 0.15, 0.1]))
        assert counts.sum() == 71
        assert np.all(np.abs(counts - 71 * np.array([0.55, 0.2, 0.15, 0.1])) < 1)


class TestScenarios:
    @pytest.mark.parametrize("scenario,cars,drones", [("i", 32, 8), ("ii", 32, 32), ("iii", 32, 32)])
    def test_population(self, scenario, cars, drones):
        cfg = scenario_config(scenario, 0)
        assert (cfg.n_car, cfg.n_drone) == (cars, drones)
        assert len(cfg.weather_mix) == cars + drones

    def test_scenario_three_single_weather(self):
        cfg = scenario_config(Scenario.III, 0)
        for mix in cfg.weather_mix:
            assert np.count_nonzero(mix) == 1
        car_w = [int(np.argmax(m)) for m in cfg.weather_mix[:32]]
        assert sorted(np.bincount(car_w).tolist()) == [8, 8, 8, 8]

    def test_client_sample_ranges(self, specs):
        clients = gen_target(specs[1], scenario_config("i", 0), 0, WORLD)
        for c in clients:
            lo, hi = (69, 72) if c.agent == Agent.CAR else (24, 25)
            assert lo <= len(c) <= hi

    def test_disjoint_ids(self, specs):
        clients = gen_target(specs[1], scenario_config("ii", 1), 1, WORLD)
        ids = np.concatenate([c.sample_ids for c in clients])
        assert len(np.unique(ids)) == len(ids)


class TestPrivacy:
    def test_stripped_hides_ground_truth(self, specs):
        c = gen_target(specs[1], scenario_config("i", 0), 0, WORLD)[0]
        assert c.hidden_labels.shape[0] == len(c)
        s = c.stripped()
        np.testing.assert_array_equal(s.samples, c.samples)
        with pytest.raises(PrivacyError):
            s.hidden_labels
        with pytest.raises(PrivacyError):
            s.hidden_weather


class TestSerialization:
    def test_roundtrip(self, specs, tmp_path):
        clients = gen_target(specs[1], scenario_config("i", 0), 0, WORLD)[:3]
        ds = clients_to_dataset(clients)
        back = load_dataset(save_dataset(tmp_path / "d.npz", ds, {"k": 1}))
        for col in ("features", "labels", "weather", "agent", "sample_id", "client_id"):
            np.testing.assert_array_equal(getattr(back, col), getattr(ds, col))
        again = dataset_to_clients(back)
        assert [c.client_id for c in again] == [0, 1, 2]

    def test_rejects_foreign_file(self, tmp_path):
        np.savez(tmp_path / "x.npz", header=np.array('{"format": "nope"}'))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x.npz")


class TestMisc:
    def test_drone_remap_covers_car_classes(self):
        assert set(DRONE_REMAP) == set(range(WORLD.n_car_classes))
        assert set(DRONE_REMAP.values()) <= set(range(WORLD.n_drone_classes))

    def test_sunlit_score(self):
        img = np.zeros((4, 4, 3))
        img[..., 0] = 0.5
        img[..., 2] = 0.25
        assert sunlit_score(img) == pytest.approx(0.75)
        with pytest.raises(ValueError):
            sunlit_score(np.zeros((4, 4)))

    @pytest.mark.parametrize("shape", [(1, 1, 3), (5, 7, 3), (64, 32, 3)])
    def test_sunlit_constant_images(self, shape):
        assert sunlit_score(np.zeros(shape)) == 0.0
        assert sunlit_score(np.ones(shape)) == 3.0

    @pytest.mark.parametrize("level,expected", [(255, 300), (170, 200), (85, 100)])
    def test_sunlit_reference_levels(self, level, expected, rng):
        # bright, mid and dark 8-bit images with mild texture, scored on a 0-100 scale per channel
        img = np.clip(level + rng.normal(0, 5, (32, 32, 3)), 0, 255) / 255 * 100
        assert sunlit_score(img) == pytest.approx(expected, abs=5)


class TestStatistics:
    def test_class_means_recoverable(self, specs):
        src = specs[0]
        ds = gen_source(src, 400, 0, WORLD)
        content = WORLD.in_dim - WORLD.cue_dims
        z = []
        for (agent, weather), spec in src.items():
            part = ds.select(agent, weather)
            for k in np.unique(part.labels):
                cells = part.features[part.labels == k][:, :content]
                expected = spec.scale * spec.class_means[k, :content] + spec.offset[:content]
                stderr = spec.scale * spec.noise_scale / np.sqrt(len(cells))
                z.extend(np.abs(cells.mean(axis=0) - expected) / stderr)
        z = np.array(z)
        # a few hundred coordinates: allow the expected handful past 3 sigma, none far out
        assert np.mean(z > 3) <= 0.01
        assert z.max() < 4.5

    def test_weather_marginals_follow_mix(self, specs):
        # per client the counts are integers out of ~24-72 samples, so compare the population
        cfg = scenario_config("i", 0)
        clients = gen_target(specs[1], cfg, 0, WORLD)
        requested = sum(len(c) * mix / mix.sum() for c, mix in zip(clients, cfg.weather_mix))
        got = sum(np.bincount(c.hidden_weather, minlength=len(WEATHERS)) for c in clients)
        total = sum(len(c) for c in clients)
        assert np.all(np.abs(got / total - requested / total) <= 0.02)
        for c, mix in zip(clients, cfg.weather_mix):
            freq = np.bincount(c.hidden_weather, minlength=len(WEATHERS))
            assert np.all(np.abs(freq - len(c) * mix / mix.sum()) < 1.0)


class TestShiftCalibration:
    def test_source_to_target_drop(self):
        cfg = RunConfig()
        env = build_environment(cfg)
        params, clf = pretrain(env.source, cfg, clf_channels=env.world.cue_channels)

        def pixel_accuracy(ds):
            preds = predict_dataset(params, clf, ds, True)
            drone = ds.agent == Agent.DRONE
            preds[drone] = class_remap(preds[drone], DRONE_REMAP)
            return float(np.mean(preds == ds.labels))

        drop = pixel_accuracy(env.source_test) - pixel_accuracy(env.test)
        assert drop >= 0.15
