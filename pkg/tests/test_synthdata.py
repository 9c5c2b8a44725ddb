"""Dirichlet partitioning, sample generation, splits, and the container format."""

import numpy as np
import pytest

from fedseq.errors import ParameterError, PartitionError
from fedseq.synthdata import (
    DatasetSpec,
    build_federated_dataset,
    build_partitions,
    class_means,
    client_rotation,
    dataset_from_bytes,
    dataset_to_bytes,
    dirichlet_label_skew,
    generate_samples,
    split_train_test,
)


def _spec(**kw):
    base = dict(num_classes=4, input_dim=6, samples_per_class=40,
                class_mean_scale=2.0, noise_std=1.0, master_seed=11)
    base.update(kw)
    return DatasetSpec(**base)


class TestDirichletAllocation:
    def test_single_client_gets_everything(self):
        alloc = dirichlet_label_skew(3, 1, 0.5, 100, seed=0)
        np.testing.assert_array_equal(alloc, [[100], [100], [100]])

    def test_row_sums_conserved(self):
        for seed in range(10):
            alloc = dirichlet_label_skew(5, 7, 0.1, 83, seed=seed)
            np.testing.assert_array_equal(alloc.sum(axis=1), np.full(5, 83))

    def test_no_client_left_empty(self):
        # alpha small enough that raw draws regularly zero clients out
        for seed in range(20):
            alloc = dirichlet_label_skew(2, 10, 0.01, 20, seed=seed)
            assert alloc.sum(axis=0).min() >= 1
            np.testing.assert_array_equal(alloc.sum(axis=1), np.full(2, 20))

    def test_alpha_must_be_positive(self):
        with pytest.raises(ParameterError):
            dirichlet_label_skew(3, 4, 0.0, 10, seed=0)

    def test_high_alpha_concentrates_near_uniform(self):
        # Monte-Carlo oracle:  Dir(100) over 10 clients has per-cell share
        # close to 0.1; tolerate ~5% of cells outside [0.08, 0.12].
        inside = 0
        total = 0
        for seed in range(20):
            alloc = dirichlet_label_skew(10, 10, 100.0, 1000, seed=seed)
            share = alloc / 1000.0
            inside += int(np.sum((share >= 0.08) & (share <= 0.12)))
            total += share.size
        assert inside / total >= 0.95

    def test_determinism(self):
        a = dirichlet_label_skew(4, 6, 0.1, 50, seed=42)
        b = dirichlet_label_skew(4, 6, 0.1, 50, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_entropy_monotone_in_alpha(self):
        def mean_entropy(alpha):
            vals = []
            for seed in range(20):
                alloc = dirichlet_label_skew(6, 8, alpha, 120, seed=seed).astype(float)
                dist = alloc / np.maximum(alloc.sum(axis=0, keepdims=True), 1)
                col = dist.T  # per-client label distribution
                with np.errstate(divide="ignore", invalid="ignore"):
                    ent = -np.nansum(np.where(col > 0, col * np.log(col), 0.0), axis=1)
                vals.append(ent.mean())
            return float(np.mean(vals))

        entropies = [mean_entropy(a) for a in (0.1, 1.0, 10.0, 100.0)]
        assert all(x <= y + 1e-12 for x, y in zip(entropies, entropies[1:])), entropies


class TestPartitions:
    def test_disjoint_and_covering(self):
        rng = np.random.default_rng(0)
        for _ in range(8):
            c = int(rng.integers(2, 7))
            n = int(rng.integers(2, 9))
            alpha = float(rng.choice([0.1, 1.0, 10.0]))
            spec = _spec(num_classes=c, samples_per_class=int(rng.integers(8, 60)),
                         master_seed=int(rng.integers(0, 1000)))
            alloc, parts = build_partitions(spec, n, alpha)
            for cls in range(c):
                seen = np.concatenate([p.indices_per_class[cls] for p in parts])
                assert len(np.unique(seen)) == len(seen)
                np.testing.assert_array_equal(np.sort(seen),
                                              np.arange(alloc[cls].sum()))


class TestGenerateSamples:
    def test_zero_noise_puts_samples_on_the_mean(self):
        spec = _spec(noise_std=0.0)
        _, parts = build_partitions(spec, 3, 1.0)
        samples = generate_samples(spec, parts)
        means = class_means(spec)
        for x, y in samples:
            for c in np.unique(y):
                np.testing.assert_array_equal(x[y == c],
                                              np.tile(means[c], (int((y == c).sum()), 1)))

    def test_no_skew_clients_share_distribution(self):
        # sampling-statistics oracle: per-class sample means of two clients
        # agree within 3 sigma / sqrt(n)
        spec = _spec(num_classes=2, samples_per_class=4000, noise_std=1.0)
        _, parts = build_partitions(spec, 2, 100.0)
        samples = generate_samples(spec, parts)
        for c in range(2):
            m0 = samples[0][0][samples[0][1] == c].mean(axis=0)
            m1 = samples[1][0][samples[1][1] == c].mean(axis=0)
            n = min((samples[0][1] == c).sum(), (samples[1][1] == c).sum())
            tol = 2 * 3.0 / np.sqrt(n)
            assert np.all(np.abs(m0 - m1) < tol)

    def test_rotation_is_orthogonal(self):
        spec = _spec(feature_skew="per_client_rotation", rotation_angle_std=0.5)
        for client in range(4):
            rot = client_rotation(spec, client)
            np.testing.assert_allclose(rot.T @ rot, np.eye(spec.input_dim), atol=1e-12)

    def test_rotation_differs_per_client(self):
        spec = _spec(feature_skew="per_client_rotation", rotation_angle_std=0.5)
        assert not np.allclose(client_rotation(spec, 0), client_rotation(spec, 1))


class TestSplit:
    def test_hundred_gives_25_75(self):
        train, test = split_train_test(np.arange(100), seed=1)
        assert len(train) == 25 and len(test) == 75

    def test_five_gives_2_3(self):
        train, test = split_train_test(np.arange(5), seed=1)
        assert len(train) == 2 and len(test) == 3

    def test_deterministic(self):
        a = split_train_test(np.arange(40), seed=9)
        b = split_train_test(np.arange(40), seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_disjoint_and_covering(self):
        train, test = split_train_test(np.arange(33), seed=5)
        both = np.sort(np.concatenate([train, test]))
        np.testing.assert_array_equal(both, np.arange(33))

    def test_too_few_samples(self):
        with pytest.raises(PartitionError):
            split_train_test(np.arange(3), seed=0)


class TestContainer:
    def test_round_trip_is_byte_identical(self):
        ds = build_federated_dataset(_spec(), num_clients=3, alpha=0.5)
        raw = dataset_to_bytes(ds)
        again = dataset_to_bytes(dataset_from_bytes(raw))
        assert raw == again

    def test_same_spec_same_bytes(self):
        a = dataset_to_bytes(build_federated_dataset(_spec(), 3, 0.5))
        b = dataset_to_bytes(build_federated_dataset(_spec(), 3, 0.5))
        assert a == b

    def test_bad_magic_rejected(self):
        with pytest.raises(PartitionError):
            dataset_from_bytes(b"NOTADATA" + b"\x00" * 64)

    def test_loaded_contents_match(self):
        ds = build_federated_dataset(_spec(), 2, 1.0)
        back = dataset_from_bytes(dataset_to_bytes(ds))
        assert back.num_clients == 2
        for c0, c1 in zip(ds.clients, back.clients):
            np.testing.assert_array_equal(c0.x_train, c1.x_train)
            np.testing.assert_array_equal(c0.y_test, c1.y_test)


class TestSpecValidation:
    def test_bounds(self):
        with pytest.raises(ParameterError):
            _spec(num_classes=1)
        with pytest.raises(ParameterError):
            _spec(input_dim=1)
        with pytest.raises(ParameterError):
            _spec(samples_per_class=7)
        with pytest.raises(ParameterError):
            _spec(feature_skew="mystery")

    def test_client_train_test_disjoint(self):
        ds = build_federated_dataset(_spec(), 3, 0.5)
        for client in ds.clients:
            assert len(client.y_train) + len(client.y_test) > 0
            # rows were split from one pool; verify no feature row repeats
            rows = {r.tobytes() for r in client.x_train}
            assert all(r.tobytes() not in rows for r in client.x_test)
