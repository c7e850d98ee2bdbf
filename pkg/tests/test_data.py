from __future__ import annotations

import json

import numpy as np
import pytest

from rankcal.data import (
    CorruptionSpec,
    Dataset,
    SyntheticSpec,
    class_means,
    corrupt_gaussian,
    generate_synthetic,
    load_csv_dataset,
    split,
    standardize_apply,
    standardize_fit,
    write_csv_dataset,
)
from rankcal.errors import ParseError, SpecError, SplitError


def basic_spec(**overrides) -> SyntheticSpec:
    defaults = dict(
        num_classes=2,
        modality_dims=(4, 3),
        samples_per_class=(50, 50),
        class_separation=(3.0, 3.0),
        noise_std=(1.0, 1.0),
        seed=0,
    )
    defaults.update(overrides)
    return SyntheticSpec(**defaults)


def nearest_mean_accuracy(train: Dataset, test: Dataset, modality: int) -> float:
    """Oracle classifier: nearest class mean estimated on the train split."""
    means = np.stack(
        [
            train.modalities[modality][train.labels == k].mean(axis=0)
            for k in range(train.num_classes)
        ]
    )
    correct = 0
    for i in range(test.num_samples):
        x = test.modalities[modality][i]
        predicted = int(np.argmin(np.linalg.norm(means - x, axis=1)))
        correct += predicted == test.label(i)
    return correct / test.num_samples


class TestSyntheticSpec:
    def test_count_mismatch_rejected(self):
        with pytest.raises(SpecError):
            basic_spec(samples_per_class=(50,))

    def test_negative_separation_rejected(self):
        with pytest.raises(SpecError):
            basic_spec(class_separation=(-1.0, 3.0))

    def test_single_class_rejected(self):
        with pytest.raises(SpecError):
            basic_spec(num_classes=1, samples_per_class=(10,))

    def test_from_json_scalar_broadcast(self):
        spec = SyntheticSpec.from_json_dict(
            {
                "num_classes": 3,
                "modality_dims": [4, 5],
                "samples_per_class": 20,
                "class_separation": 2.5,
                "noise_std": 1.5,
                "seed": 7,
            }
        )
        assert spec.samples_per_class == (20, 20, 20)
        assert spec.class_separation == (2.5, 2.5)
        assert spec.noise_std == (1.5, 1.5)


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(basic_spec())
        b = generate_synthetic(basic_spec())
        for ma, mb in zip(a.modalities, b.modalities):
            assert ma.tobytes() == mb.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_shapes_and_labels(self):
        spec = basic_spec(samples_per_class=(30, 70))
        dataset = generate_synthetic(spec)
        assert dataset.num_samples == 100
        assert dataset.modality_dims == (4, 3)
        assert dataset.class_counts() == [30, 70]

    def test_mean_separation_is_exact(self):
        spec = basic_spec(num_classes=4, samples_per_class=(5, 5, 5, 5), class_separation=(6.0, 2.0))
        for m, sep in enumerate(spec.class_separation):
            means = class_means(spec, m)
            dists = [
                np.linalg.norm(means[a] - means[b])
                for a in range(4)
                for b in range(a + 1, 4)
            ]
            assert min(dists) == pytest.approx(sep * spec.noise_std[m], rel=1e-12)

    def test_zero_separation_collapses_means(self):
        spec = basic_spec(class_separation=(0.0, 0.0))
        for m in range(2):
            assert not class_means(spec, m).any()

    def test_zero_separation_is_chance_level(self):
        spec = basic_spec(class_separation=(0.0, 0.0), samples_per_class=(200, 200))
        dataset = generate_synthetic(spec)
        train, test = split(dataset, 0.8, seed=0)
        for m in range(2):
            acc = nearest_mean_accuracy(train, test, m)
            assert 0.3 < acc < 0.7

    def test_strong_separation_nearest_mean_oracle(self):
        spec = basic_spec(
            class_separation=(6.0, 6.0), noise_std=(1.0, 1.0), samples_per_class=(200, 200)
        )
        dataset = generate_synthetic(spec)
        train, test = split(dataset, 0.8, seed=0)
        for m in range(2):
            assert nearest_mean_accuracy(train, test, m) > 0.99


class TestCsvRoundTrip:
    def test_write_load_identical(self, tmp_path):
        dataset = generate_synthetic(basic_spec(samples_per_class=(10, 10)))
        manifest = write_csv_dataset(dataset, tmp_path / "ds")
        loaded = load_csv_dataset(manifest)
        assert loaded.num_classes == dataset.num_classes
        assert np.array_equal(loaded.labels, dataset.labels)
        for a, b in zip(loaded.modalities, dataset.modalities):
            # values survive the 9-significant-digit serialization
            assert np.allclose(a, b, rtol=1e-8, atol=1e-12)

    def test_second_write_byte_identical(self, tmp_path):
        dataset = generate_synthetic(basic_spec(samples_per_class=(10, 10)))
        write_csv_dataset(dataset, tmp_path / "a")
        write_csv_dataset(dataset, tmp_path / "b")
        for name in ("manifest.json", "modality_0.csv", "modality_1.csv", "labels.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_write_load_write_stable(self, tmp_path):
        dataset = generate_synthetic(basic_spec(samples_per_class=(10, 10)))
        manifest = write_csv_dataset(dataset, tmp_path / "a")
        loaded = load_csv_dataset(manifest)
        write_csv_dataset(loaded, tmp_path / "b")
        for name in ("modality_0.csv", "modality_1.csv", "labels.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def write_manifest(tmp_path, modalities, labels, num_classes=2):
    entries = []
    for m, rows in enumerate(modalities):
        name = f"m{m}.csv"
        (tmp_path / name).write_text("\n".join(",".join(r) for r in rows) + "\n")
        entries.append({"path": name, "dim": len(rows[0])})
    (tmp_path / "labels.csv").write_text("\n".join(labels) + "\n")
    manifest = {"num_classes": num_classes, "modalities": entries, "labels": "labels.csv"}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestLoadCsvErrors:
    def test_minimal_load(self, tmp_path):
        manifest = write_manifest(
            tmp_path,
            [[["1.0", "2.0"]] * 3, [["0.5"]] * 3],
            ["0", "1", "0"],
        )
        dataset = load_csv_dataset(manifest)
        assert dataset.num_samples == 3
        assert dataset.modality_dims == (2, 1)

    def test_label_out_of_range_names_line(self, tmp_path):
        manifest = write_manifest(
            tmp_path,
            [[["1.0", "2.0"]] * 3, [["0.5"]] * 3],
            ["0", "2", "0"],
        )
        with pytest.raises(ParseError) as excinfo:
            load_csv_dataset(manifest)
        assert "labels.csv" in str(excinfo.value)
        assert excinfo.value.line == 2

    def test_row_count_mismatch(self, tmp_path):
        manifest = write_manifest(
            tmp_path,
            [[["1.0", "2.0"]] * 4, [["0.5"]] * 3],
            ["0", "1", "0"],
        )
        with pytest.raises(ParseError) as excinfo:
            load_csv_dataset(manifest)
        assert "row counts disagree" in str(excinfo.value)

    def test_non_numeric_cell_names_file_and_line(self, tmp_path):
        manifest = write_manifest(
            tmp_path,
            [[["1.0", "2.0"], ["1.0", "oops"], ["0.0", "0.0"]], [["0.5"]] * 3],
            ["0", "1", "0"],
        )
        with pytest.raises(ParseError) as excinfo:
            load_csv_dataset(manifest)
        assert "m0.csv" in str(excinfo.value)
        assert excinfo.value.line == 2

    def test_dim_mismatch_names_line(self, tmp_path):
        manifest = write_manifest(
            tmp_path,
            [[["1.0", "2.0"], ["1.0"], ["0.0", "0.0"]], [["0.5"]] * 3],
            ["0", "1", "0"],
        )
        with pytest.raises(ParseError) as excinfo:
            load_csv_dataset(manifest)
        assert excinfo.value.line == 2

    def test_missing_manifest_key(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"num_classes": 2}))
        with pytest.raises(ParseError):
            load_csv_dataset(path)


class TestSplit:
    def test_80_20_balanced(self):
        dataset = generate_synthetic(basic_spec(samples_per_class=(50, 50)))
        train, test = split(dataset, 0.8, seed=0)
        assert train.num_samples == 80 and test.num_samples == 20
        assert train.class_counts() == [40, 40]
        assert test.class_counts() == [10, 10]

    def test_deterministic(self):
        dataset = generate_synthetic(basic_spec())
        a_train, a_test = split(dataset, 0.8, seed=5)
        b_train, b_test = split(dataset, 0.8, seed=5)
        assert np.array_equal(a_train.labels, b_train.labels)
        assert a_train.modalities[0].tobytes() == b_train.modalities[0].tobytes()
        assert a_test.modalities[1].tobytes() == b_test.modalities[1].tobytes()

    def test_union_is_original_multiset(self):
        dataset = generate_synthetic(basic_spec(samples_per_class=(13, 17)))
        train, test = split(dataset, 0.7, seed=3)
        assert train.num_samples + test.num_samples == dataset.num_samples
        for m in range(dataset.num_modalities):
            combined = np.concatenate([train.modalities[m], test.modalities[m]])
            original = dataset.modalities[m]
            order_a = np.lexsort(combined.T)
            order_b = np.lexsort(original.T)
            assert np.array_equal(combined[order_a], original[order_b])

    def test_small_class_rejected(self):
        dataset = Dataset(
            modalities=[np.zeros((3, 2)), np.zeros((3, 2))],
            labels=np.array([0, 0, 1]),
            num_classes=2,
        )
        with pytest.raises(SplitError):
            split(dataset, 0.5, seed=0)

    def test_fraction_bounds(self):
        dataset = generate_synthetic(basic_spec())
        with pytest.raises(SplitError):
            split(dataset, 0.0, seed=0)
        with pytest.raises(SplitError):
            split(dataset, 1.0, seed=0)


class TestCorruptGaussian:
    def test_zero_epsilon_bit_identical(self):
        dataset = generate_synthetic(basic_spec())
        out = corrupt_gaussian(dataset, CorruptionSpec(frozenset([0]), epsilon=0.0, seed=1))
        for a, b in zip(out.modalities, dataset.modalities):
            assert a.tobytes() == b.tobytes()

    def test_empty_targets_bit_identical(self):
        dataset = generate_synthetic(basic_spec())
        out = corrupt_gaussian(dataset, CorruptionSpec(frozenset(), epsilon=0.5, seed=1))
        for a, b in zip(out.modalities, dataset.modalities):
            assert a.tobytes() == b.tobytes()

    def test_untargeted_modality_untouched_and_labels_kept(self):
        dataset = generate_synthetic(basic_spec())
        out = corrupt_gaussian(dataset, CorruptionSpec(frozenset([1]), epsilon=0.5, seed=1))
        assert out.modalities[0].tobytes() == dataset.modalities[0].tobytes()
        assert not np.array_equal(out.modalities[1], dataset.modalities[1])
        assert np.array_equal(out.labels, dataset.labels)

    def test_noise_variance_matches_epsilon(self):
        spec = basic_spec(modality_dims=(100, 3), samples_per_class=(100, 100))
        dataset = generate_synthetic(spec)
        out = corrupt_gaussian(dataset, CorruptionSpec(frozenset([0]), epsilon=0.25, seed=2))
        noise = out.modalities[0] - dataset.modalities[0]
        assert noise.size == 20_000
        assert abs(noise.var() - 0.25) / 0.25 < 0.05

    def test_std_interpretation_flag(self):
        spec = CorruptionSpec(frozenset([0]), epsilon=0.25, seed=0, epsilon_is="std")
        assert spec.noise_std() == 0.25
        spec_var = CorruptionSpec(frozenset([0]), epsilon=0.25, seed=0)
        assert spec_var.noise_std() == 0.5

    def test_deterministic(self):
        dataset = generate_synthetic(basic_spec())
        spec = CorruptionSpec(frozenset([0, 1]), epsilon=0.3, seed=9)
        a = corrupt_gaussian(dataset, spec)
        b = corrupt_gaussian(dataset, spec)
        for ma, mb in zip(a.modalities, b.modalities):
            assert ma.tobytes() == mb.tobytes()

    def test_invalid_target_rejected(self):
        dataset = generate_synthetic(basic_spec())
        with pytest.raises(SpecError):
            corrupt_gaussian(dataset, CorruptionSpec(frozenset([7]), epsilon=0.1, seed=0))


class TestStandardize:
    def test_train_split_standardized(self):
        dataset = generate_synthetic(basic_spec(class_separation=(5.0, 5.0)))
        stats = standardize_fit(dataset)
        out = standardize_apply(dataset, stats)
        for block in out.modalities:
            assert np.max(np.abs(block.mean(axis=0))) < 1e-12
            assert np.max(np.abs(block.std(axis=0) - 1.0)) < 1e-12

    def test_constant_feature_safe(self):
        dataset = Dataset(
            modalities=[np.ones((5, 2)), np.zeros((5, 3))],
            labels=np.array([0, 0, 1, 1, 0]),
            num_classes=2,
        )
        out = standardize_apply(dataset, standardize_fit(dataset))
        assert np.isfinite(out.modalities[0]).all()
        assert not out.modalities[0].any()
