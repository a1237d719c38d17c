import dataclasses
import json
from collections import Counter

import numpy as np
import pytest

from ssda.data import (
    BatchStream,
    DatasetError,
    HELDOUT_FRACTION,
    Sample,
    SamplePool,
    ShiftSpec,
    generate_shifted_domains,
    load_benchmark_files,
    load_delimited_dataset,
    sample_anchors,
    save_delimited_dataset,
    write_benchmark_files,
)
from ssda.losses import HyperParams
from ssda.metrics import accuracy
from ssda.training import TrainConfig, train_stage1

SMALL_SPEC = ShiftSpec(
    num_classes=3, input_dim=6, samples_per_class_source=40,
    samples_per_class_target=40, shift_magnitude=0.8, cluster_spread=0.5, seed=7,
)


def source_only_config(seed, **over):
    return TrainConfig(
        seed=seed, iterations_stage1=300, iterations_stage2=0, eval_every=0,
        hyper=HyperParams(alpha=0.0), stage1_augment_source=False, **over,
    )


class TestGenerator:
    def test_same_seed_bit_identical(self):
        a = generate_shifted_domains(SMALL_SPEC)
        b = generate_shifted_domains(SMALL_SPEC)
        for pa, pb in [(a.split.source, b.split.source),
                       (a.split.target_unlabeled, b.split.target_unlabeled)]:
            assert len(pa) == len(pb)
            for sa, sb in zip(pa, pb):
                assert sa.id == sb.id and sa.label == sb.label
                np.testing.assert_array_equal(sa.features, sb.features)
        assert a.eval_labels == b.eval_labels
        assert [s.id for s in a.heldout] == [s.id for s in b.heldout]

    def test_different_seed_differs(self):
        a = generate_shifted_domains(SMALL_SPEC)
        b = generate_shifted_domains(dataclasses.replace(SMALL_SPEC, seed=8))
        assert not np.array_equal(a.split.source.samples[0].features,
                                  b.split.source.samples[0].features)

    def test_source_label_balance_exact(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        counts = Counter(s.label for s in bench.split.source)
        assert counts == {c: 40 for c in range(3)}

    def test_heldout_fraction_per_class(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        held_counts = Counter(s.label for s in bench.heldout)
        expected = round(HELDOUT_FRACTION * 40)
        assert held_counts == {c: expected for c in range(3)}
        unl_counts = Counter(bench.eval_labels[s.id] for s in bench.split.target_unlabeled)
        assert unl_counts == {c: 40 - expected for c in range(3)}

    def test_unlabeled_pool_has_no_labels(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        assert all(s.label is None for s in bench.split.target_unlabeled)
        assert set(bench.eval_labels) == {s.id for s in bench.split.target_unlabeled}

    def test_zero_magnitude_means_coincide(self):
        spec = dataclasses.replace(SMALL_SPEC, shift_magnitude=0.0,
                                   samples_per_class_source=150, samples_per_class_target=150)
        bench = generate_shifted_domains(spec)
        target_all = list(bench.split.target_unlabeled) + bench.heldout
        for c in range(spec.num_classes):
            src = np.mean([s.features for s in bench.split.source if s.label == c], axis=0)
            lab = lambda s: s.label if s.label is not None else bench.eval_labels[s.id]
            tgt = np.mean([s.features for s in target_all if lab(s) == c], axis=0)
            # sampling noise of a class mean is spread/sqrt(n) per coordinate
            assert np.abs(src - tgt).max() < 5 * spec.cluster_spread / np.sqrt(150)

    def test_zero_magnitude_source_model_transfers(self):
        spec = dataclasses.replace(SMALL_SPEC, shift_magnitude=0.0)
        bench = generate_shifted_domains(spec)
        cfg = source_only_config(seed=7)
        params, _ = train_stage1(bench.split, cfg)
        source_acc = accuracy(params, bench.split.source.samples)
        target_acc = accuracy(params, bench.heldout)
        assert abs(source_acc - target_acc) <= 2.0

    def test_pi_rotation_two_symmetric_classes_swaps_means(self):
        spec = ShiftSpec(num_classes=2, input_dim=2, samples_per_class_source=150,
                         samples_per_class_target=150, shift_kind="rotation",
                         shift_magnitude=np.pi, cluster_spread=0.3, seed=3)
        bench = generate_shifted_domains(spec)
        src_means = [np.mean([s.features for s in bench.split.source if s.label == c], axis=0)
                     for c in range(2)]
        # centered 2-class means are antipodal, so a pi rotation in d=2 swaps them
        np.testing.assert_allclose(src_means[0], -src_means[1], atol=0.2)
        target_all = list(bench.split.target_unlabeled) + bench.heldout
        lab = lambda s: s.label if s.label is not None else bench.eval_labels[s.id]
        tgt0 = np.mean([s.features for s in target_all if lab(s) == 0], axis=0)
        np.testing.assert_allclose(tgt0, src_means[1], atol=0.2)
        cfg = source_only_config(seed=3)
        params, _ = train_stage1(bench.split, cfg)
        assert accuracy(params, bench.split.source.samples) > 90.0
        assert accuracy(params, bench.heldout) <= 50.0  # means swapped: at or below chance

    def test_rotation_needs_two_dims(self):
        with pytest.raises(ValueError):
            generate_shifted_domains(dataclasses.replace(SMALL_SPEC, input_dim=1))

    def test_bad_counts_rejected(self):
        with pytest.raises(ValueError):
            generate_shifted_domains(dataclasses.replace(SMALL_SPEC, samples_per_class_source=0))

    @pytest.mark.parametrize("kind", ["translation", "scale", "mixed"])
    def test_other_shift_kinds_generate(self, kind):
        bench = generate_shifted_domains(dataclasses.replace(SMALL_SPEC, shift_kind=kind))
        assert len(bench.split.target_unlabeled) > 0


class TestAnchors:
    def test_counts_one_shot(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        before = len(bench.split.target_unlabeled)
        anchored = sample_anchors(bench, k_shot=1, seed=0)
        assert len(anchored.split.target_labeled) == 3
        assert len(anchored.split.target_unlabeled) == before - 3

    def test_counts_three_shot_126_classes(self):
        spec = ShiftSpec(num_classes=126, input_dim=4, samples_per_class_source=1,
                         samples_per_class_target=5, shift_magnitude=0.3,
                         cluster_spread=0.4, seed=1)
        bench = generate_shifted_domains(spec)
        anchored = sample_anchors(bench, k_shot=3, seed=0)
        assert len(anchored.split.target_labeled) == 378

    def test_class_balanced_and_disjoint(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        anchored = sample_anchors(bench, k_shot=3, seed=5)
        counts = Counter(s.label for s in anchored.split.target_labeled)
        assert counts == {c: 3 for c in range(3)}
        anchored.split.validate()
        anchor_ids = {s.id for s in anchored.split.target_labeled}
        assert not anchor_ids & set(anchored.eval_labels)
        # anchor labels match the sealed ground truth they came from
        for s in anchored.split.target_labeled:
            assert bench.eval_labels[s.id] == s.label

    def test_different_seed_different_anchors_same_counts(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        a = sample_anchors(bench, k_shot=2, seed=1)
        b = sample_anchors(bench, k_shot=2, seed=2)
        ids_a = {s.id for s in a.split.target_labeled}
        ids_b = {s.id for s in b.split.target_labeled}
        assert ids_a != ids_b
        assert Counter(s.label for s in a.split.target_labeled) == \
               Counter(s.label for s in b.split.target_labeled)

    def test_same_seed_deterministic(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        a = sample_anchors(bench, k_shot=2, seed=9)
        b = sample_anchors(bench, k_shot=2, seed=9)
        assert [s.id for s in a.split.target_labeled] == [s.id for s in b.split.target_labeled]

    def test_insufficient_samples_rejected(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        with pytest.raises(ValueError):
            sample_anchors(bench, k_shot=40, seed=0)

    def test_double_sampling_rejected(self):
        bench = generate_shifted_domains(SMALL_SPEC)
        anchored = sample_anchors(bench, k_shot=1, seed=0)
        with pytest.raises(ValueError):
            sample_anchors(anchored, k_shot=1, seed=0)


def tiny_pool(n=5, d=2):
    return SamplePool([Sample(id=i, features=np.full(d, float(i)), label=0) for i in range(n)],
                      name="tiny")


class TestBatchStream:
    def test_short_final_batch(self):
        stream = BatchStream(tiny_pool(5), batch_size=2, seed=0)
        sizes = [len(stream.next_batch()) for _ in range(3)]
        assert sizes == [2, 2, 1]

    def test_same_seed_same_sequence(self):
        a = BatchStream(tiny_pool(), batch_size=2, seed=4)
        b = BatchStream(tiny_pool(), batch_size=2, seed=4)
        for _ in range(7):
            assert [s.id for s in a.next_batch()] == [s.id for s in b.next_batch()]

    def test_pass_is_permutation_of_pool(self):
        pool = tiny_pool(7)
        stream = BatchStream(pool, batch_size=3, seed=1)
        seen = []
        for _ in range(3):
            seen.extend(s.id for s in stream.next_batch())
        assert sorted(seen) == list(range(7))

    def test_cycles_with_fresh_permutations(self):
        stream = BatchStream(tiny_pool(6), batch_size=6, seed=2)
        first = [s.id for s in stream.next_batch()]
        second = [s.id for s in stream.next_batch()]
        assert sorted(first) == sorted(second)
        assert first != second  # new seeded permutation per pass

    def test_no_shuffle_preserves_order(self):
        stream = BatchStream(tiny_pool(4), batch_size=4, seed=3, epoch_shuffle=False)
        assert [s.id for s in stream.next_batch()] == [0, 1, 2, 3]

    def test_state_restore_resumes_identically(self):
        a = BatchStream(tiny_pool(7), batch_size=2, seed=5)
        for _ in range(3):
            a.next_batch()
        state = a.state
        b = BatchStream(tiny_pool(7), batch_size=2, seed=5, state=state)
        for _ in range(5):
            assert [s.id for s in a.next_batch()] == [s.id for s in b.next_batch()]

    def test_consumption_counter(self):
        pool = tiny_pool(5)
        stream = BatchStream(pool, batch_size=2, seed=0)
        stream.next_batch()
        stream.next_batch()
        assert pool.consumed == 4

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            BatchStream(SamplePool([], "empty"), batch_size=1, seed=0)


class TestDelimited:
    def test_basic_load(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1.0,2.0,0\n3.0,4.0,1\n-1.5,0.25,0\n")
        samples = load_delimited_dataset(path, num_features=2, has_labels=True, num_classes=2)
        assert len(samples) == 3
        assert [s.id for s in samples] == [0, 1, 2]
        np.testing.assert_array_equal(samples[0].features, [1.0, 2.0])
        assert [s.label for s in samples] == [0, 1, 0]

    def test_header_only_gives_empty_list(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("x0,x1,label\n")
        assert load_delimited_dataset(path, num_features=2, has_labels=True) == []

    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = [Sample(id=i, features=rng.standard_normal(3) * 10.0 ** int(rng.integers(-8, 8)),
                          label=int(rng.integers(0, 4))) for i in range(20)]
        path = tmp_path / "roundtrip.csv"
        save_delimited_dataset(samples, path)
        loaded = load_delimited_dataset(path, num_features=3, has_labels=True, num_classes=4)
        for orig, back in zip(samples, loaded):
            np.testing.assert_array_equal(orig.features, back.features)
            assert orig.label == back.label

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,0\nnope,4.0,1\n")
        with pytest.raises(DatasetError, match=":2:"):
            load_delimited_dataset(path, num_features=2, has_labels=True)

    def test_wrong_column_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,0\n3.0,1\n")
        with pytest.raises(DatasetError, match=":2:"):
            load_delimited_dataset(path, num_features=2, has_labels=True)

    def test_label_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,7\n")
        with pytest.raises(DatasetError, match="label 7"):
            load_delimited_dataset(path, num_features=2, has_labels=True, num_classes=3)

    def test_non_integer_label_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0,0.5\n")
        with pytest.raises(DatasetError):
            load_delimited_dataset(path, num_features=2, has_labels=True)


class TestBenchmarkFiles:
    def test_file_roundtrip_reproduces_benchmark(self, tmp_path):
        manifest = write_benchmark_files(SMALL_SPEC, tmp_path)
        assert manifest["spec"]["seed"] == SMALL_SPEC.seed
        loaded = load_benchmark_files(tmp_path / "source.csv", tmp_path / "target.csv",
                                      tmp_path / "manifest.json")
        direct = generate_shifted_domains(SMALL_SPEC)
        assert loaded.eval_labels == direct.eval_labels
        assert [s.id for s in loaded.heldout] == [s.id for s in direct.heldout]
        for pa, pb in [(loaded.split.source, direct.split.source),
                       (loaded.split.target_unlabeled, direct.split.target_unlabeled)]:
            for sa, sb in zip(pa, pb):
                assert sa.id == sb.id
                np.testing.assert_array_equal(sa.features, sb.features)

    def test_rerun_is_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        write_benchmark_files(SMALL_SPEC, a_dir)
        write_benchmark_files(SMALL_SPEC, b_dir)
        for name in ("source.csv", "target.csv", "manifest.json"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_row_counts(self, tmp_path):
        write_benchmark_files(SMALL_SPEC, tmp_path)
        lines = (tmp_path / "source.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 40  # header + rows

    def test_manifest_missing_spec_rejected(self, tmp_path):
        write_benchmark_files(SMALL_SPEC, tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps({"schema_version": 1}))
        with pytest.raises(DatasetError):
            load_benchmark_files(tmp_path / "source.csv", tmp_path / "target.csv",
                                 tmp_path / "manifest.json")
