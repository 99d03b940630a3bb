import math
from collections import Counter

import numpy as np
import pytest

from fedsilo.data_gen import (
    ScenarioSpec,
    gen_clustered_sources,
    gen_iid_halfnormal,
    gen_label_shards,
    gen_motivating_example,
    generate,
    halfnormal_sizes,
    load_csv,
    shard_assignment,
    source_means,
)
from fedsilo.errors import ConfigError, ParseError


def test_round_robin_sources():
    spec = ScenarioSpec(kind="clustered_sources", n_clients=10, n_sources=5, samples_per_client=40)
    data = gen_clustered_sources(spec, 0)
    assert Counter(d.source_id for d in data) == {s: 2 for s in range(5)}


def test_too_many_sources():
    with pytest.raises(ConfigError):
        gen_clustered_sources(ScenarioSpec(n_clients=3, n_sources=4), 0)


def test_same_source_same_parameters_and_concentration():
    spec = ScenarioSpec(n_clients=4, n_sources=2, samples_per_client=4000, classes=3,
                        feature_dim=5, split=0.5)
    data = gen_clustered_sources(spec, 1)
    a, b = data[0], data[2]
    assert a.source_id == b.source_id == 0
    means = source_means(spec, 1)
    assert np.array_equal(means, source_means(spec, 1))
    for c in range(3):
        xa = a.train[0][a.train[1] == c]
        xb = b.train[0][b.train[1] == c]
        # sd of the difference of two independent sample means with unit variance
        sd = math.sqrt(1 / len(xa) + 1 / len(xb))
        assert np.all(np.abs(xa.mean(0) - xb.mean(0)) < 4 * sd)
        np.testing.assert_allclose(xa.mean(0), means[0, c], atol=4 / math.sqrt(len(xa)))


def test_distinct_sources_separated():
    spec = ScenarioSpec(n_clients=6, n_sources=3, source_separation=4.0)
    means = source_means(spec, 2)
    for s in range(3):
        for r in range(s + 1, 3):
            assert np.linalg.norm(means[s, 0] - means[r, 0]) >= 4.0


def test_disjoint_label_sources():
    spec = ScenarioSpec(n_clients=5, n_sources=5, samples_per_client=50, disjoint_labels=True)
    data = gen_clustered_sources(spec, 0)
    for i in range(5):
        for j in range(i + 1, 5):
            assert not (data[i].labels() & data[j].labels())


def test_halfnormal_unit_hook_and_clamp():
    spec = ScenarioSpec(kind="iid_halfnormal", n_clients=8, base_size=50, unit_sizes=True)
    assert [d.size for d in gen_iid_halfnormal(spec, 0)] == [50] * 8
    spec = ScenarioSpec(kind="iid_halfnormal", n_clients=40, base_size=50, min_size=10)
    assert min(halfnormal_sizes(spec, 3)) >= 10
    assert all(d.size >= 10 for d in gen_iid_halfnormal(spec, 3))


def test_halfnormal_mean_size():
    # E|Z| = sqrt(2/pi); clamping at min_size only pushes the mean up a little
    expected = 120 * math.sqrt(2 / math.pi)
    means = []
    for seed in range(200):
        spec = ScenarioSpec(kind="iid_halfnormal", n_clients=20, base_size=120)
        sizes = halfnormal_sizes(spec, seed)
        means.append(np.mean(sizes))
    assert abs(np.mean(means) - expected) < 3.0


def test_halfnormal_first_five_seeds_in_range():
    for seed in range(5):
        sizes = halfnormal_sizes(ScenarioSpec(kind="iid_halfnormal", n_clients=20, base_size=120), seed)
        assert 60 <= np.mean(sizes) <= 200


def test_label_shards():
    spec = ScenarioSpec(kind="label_shards", n_clients=10, n_shards=100, classes=10, shard_size=20)
    owned = shard_assignment(spec, 4)
    flat = sorted(s for client in owned for s in client)
    assert flat == list(range(100))
    shard_class = np.repeat(np.arange(10), 10)
    assert Counter(shard_class.tolist()) == {c: 10 for c in range(10)}
    data = gen_label_shards(spec, 4)
    for shards, d in zip(owned, data):
        assert d.labels() == {int(shard_class[s]) for s in shards}
        assert d.size + len(d.test[1]) == 20 * len(shards)
        if len(shards) == 1:
            assert len(d.labels()) == 1


def test_label_shards_errors():
    with pytest.raises(ConfigError):
        gen_label_shards(ScenarioSpec(kind="label_shards", n_clients=5, n_shards=4, classes=2), 0)
    with pytest.raises(ConfigError):
        gen_label_shards(ScenarioSpec(kind="label_shards", n_shards=15, classes=10), 0)


def test_motivating_example():
    data = gen_motivating_example(0)
    assert len(data) == 3
    assert data[0].labels() == data[1].labels() == set(range(5))
    assert data[2].labels() == set(range(5, 10))
    assert abs(data[1].size - 4 * data[0].size) <= 1


def test_generators_deterministic_and_finite():
    specs = [
        ScenarioSpec(kind="clustered_sources", n_clients=4, n_sources=2, samples_per_client=30),
        ScenarioSpec(kind="iid_halfnormal", n_clients=4, base_size=20),
        ScenarioSpec(kind="label_shards", n_clients=4, n_shards=20, classes=10, shard_size=10),
        ScenarioSpec(kind="motivating", per_class=20),
    ]
    for spec in specs:
        a, b = generate(spec, 7), generate(spec, 7)
        assert [d.digest() for d in a] == [d.digest() for d in b]
        for d in a:
            assert np.all(np.isfinite(d.train[0]))
            assert d.train[1].min() >= 0 and d.train[1].max() < spec.classes


def test_extra_clients_appended():
    spec = ScenarioSpec(n_clients=4, n_sources=2, samples_per_client=30, n_extra=2)
    data = gen_clustered_sources(spec, 0)
    assert len(data) == 6
    base = gen_clustered_sources(ScenarioSpec(n_clients=4, n_sources=2, samples_per_client=30), 0)
    assert [d.digest() for d in data[:4]] == [d.digest() for d in base]


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_csv_split(tmp_path):
    rows = "\n".join(f"{i},{i * 0.5},{i % 3}" for i in range(100))
    paths = (write(tmp_path, "a.csv", "f1,f2,label\n" + rows),
             write(tmp_path, "b.csv", "f1,f2,label\n" + rows))
    data = load_csv(ScenarioSpec(kind="csv", n_clients=2, classes=3, paths=paths), 0)
    assert data[0].size == 80 and len(data[0].test[1]) == 20


def test_csv_bad_label(tmp_path):
    path = write(tmp_path, "a.csv", "f,label\n1.0,2\n2.0,3.5\n")
    spec = ScenarioSpec(kind="csv", n_clients=2, classes=5, paths=(path, path))
    with pytest.raises(ParseError) as err:
        load_csv(spec, 0)
    assert err.value.line == 3 and "a.csv:3" in str(err.value)


def test_csv_errors(tmp_path):
    empty = write(tmp_path, "e.csv", "f,label\n")
    with pytest.raises(ConfigError, match="no data rows"):
        load_csv(ScenarioSpec(kind="csv", n_clients=2, paths=(empty, empty)), 0)
    ragged = write(tmp_path, "r.csv", "f,g,label\n1,2,0\n1,0\n")
    with pytest.raises(ParseError, match="expected 3 columns"):
        load_csv(ScenarioSpec(kind="csv", n_clients=2, paths=(ragged, ragged)), 0)
    with pytest.raises(ConfigError):
        ScenarioSpec(kind="csv", n_clients=2, paths=(ragged,))


def test_spec_validation():
    with pytest.raises(ConfigError):
        ScenarioSpec(n_clients=1)
    with pytest.raises(ConfigError):
        ScenarioSpec(split=1.0)
    with pytest.raises(ConfigError):
        ScenarioSpec(kind="imagenet")
