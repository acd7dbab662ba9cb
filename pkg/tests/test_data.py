import csv
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pneumoxray import (
    AugmentPolicy,
    ImageRecord,
    Label,
    PreprocessConfig,
    SplitManifest,
    SplitName,
    XrayDataset,
    augment_generator,
    augment_image,
    destandardize,
    load_manifest,
    make_datasets,
    manifest_hash,
    preprocess_image,
    save_manifest,
    scan_dataset_dir,
    standardize,
    stratified_split,
    to_unit_tensor,
)
from pneumoxray.errors import DatasetError, ImageDecodeError, SplitError

from conftest import make_image_tree


def synthetic_records(n_normal: int, n_pneumonia: int) -> SplitManifest:
    records = [
        ImageRecord(id=f"NORMAL/n_{i:05d}.jpeg", label=Label.NORMAL)
        for i in range(n_normal)
    ] + [
        ImageRecord(id=f"PNEUMONIA/p_{i:05d}.jpeg", label=Label.PNEUMONIA)
        for i in range(n_pneumonia)
    ]
    return SplitManifest(records=tuple(records), seed=42)


class TestScan:
    def test_finds_all_images(self, tiny_root):
        manifest = scan_dataset_dir(tiny_root)
        assert len(manifest.records) == 12
        counts = manifest.class_counts()
        assert counts[Label.NORMAL] == 6
        assert counts[Label.PNEUMONIA] == 6

    def test_ids_are_relative_posix_paths_sorted(self, tiny_root):
        manifest = scan_dataset_dir(tiny_root)
        ids = manifest.ids
        assert ids == sorted(ids)
        assert all("/" in rid and "\\" not in rid for rid in ids)
        assert all(
            rid.startswith(("NORMAL/", "PNEUMONIA/")) for rid in ids
        )

    def test_missing_class_dir_fatal(self, tmp_path):
        (tmp_path / "NORMAL").mkdir()
        with pytest.raises(DatasetError):
            scan_dataset_dir(tmp_path)

    def test_unreadable_file_skipped_with_warning(self, tiny_root, caplog):
        bad = tiny_root / "NORMAL" / "broken.jpeg"
        bad.write_bytes(b"not an image at all")
        with caplog.at_level("WARNING"):
            manifest = scan_dataset_dir(tiny_root)
        assert len(manifest.records) == 12
        assert any("broken.jpeg" in rec.message for rec in caplog.records)

    def test_non_image_extension_ignored(self, tiny_root):
        (tiny_root / "NORMAL" / "notes.txt").write_text("ignore me")
        manifest = scan_dataset_dir(tiny_root)
        assert len(manifest.records) == 12

    def test_duplicate_ids_rejected(self):
        rec = ImageRecord(id="NORMAL/a.jpeg", label=Label.NORMAL)
        with pytest.raises(DatasetError):
            SplitManifest(records=(rec, rec), seed=0)


class TestStratifiedSplit:
    def test_full_dataset_counts(self):
        # 1341 + 3875 images must land 1072/134/135 and 3100/387/388
        manifest = stratified_split(synthetic_records(1341, 3875))
        counts = manifest.split_counts()
        assert counts["TRAIN"] == {"NORMAL": 1072, "PNEUMONIA": 3100}
        assert counts["VAL"] == {"NORMAL": 134, "PNEUMONIA": 387}
        assert counts["TEST"] == {"NORMAL": 135, "PNEUMONIA": 388}

    def test_ten_records_split_8_1_1(self):
        manifest = stratified_split(synthetic_records(10, 10))
        counts = manifest.split_counts()
        assert counts["TRAIN"]["NORMAL"] == 8
        assert counts["VAL"]["NORMAL"] == 1
        assert counts["TEST"]["NORMAL"] == 1

    def test_deterministic_for_fixed_seed(self):
        a = stratified_split(synthetic_records(50, 70), seed=123)
        b = stratified_split(synthetic_records(50, 70), seed=123)
        assert [(r.id, r.split) for r in a.records] == [
            (r.id, r.split) for r in b.records
        ]

    def test_seed_changes_assignment(self):
        a = stratified_split(synthetic_records(200, 200), seed=1)
        b = stratified_split(synthetic_records(200, 200), seed=2)
        assignments_a = {r.id: r.split for r in a.records}
        assignments_b = {r.id: r.split for r in b.records}
        assert assignments_a != assignments_b

    def test_partition_preserves_ids(self):
        base = synthetic_records(37, 53)
        out = stratified_split(base, seed=5)
        assert sorted(out.ids) == sorted(base.ids)
        assert all(r.split is not SplitName.UNASSIGNED for r in out.records)

    def test_too_few_records_fatal(self):
        with pytest.raises(SplitError):
            stratified_split(synthetic_records(2, 10))

    def test_resplit_fatal(self):
        out = stratified_split(synthetic_records(10, 10))
        with pytest.raises(SplitError):
            stratified_split(out)

    def test_bad_ratios_rejected(self):
        with pytest.raises(SplitError):
            stratified_split(synthetic_records(10, 10), ratios=(0.5, 0.2, 0.2))
        with pytest.raises(SplitError):
            stratified_split(synthetic_records(10, 10), ratios=(1.0, 0.0, 0.0))

    @given(
        n_normal=st.integers(min_value=3, max_value=400),
        n_pneumonia=st.integers(min_value=3, max_value=400),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_counts_follow_floor_rule(self, n_normal, n_pneumonia, seed):
        manifest = stratified_split(
            synthetic_records(n_normal, n_pneumonia), seed=seed
        )
        counts = manifest.split_counts()
        for label, n in (("NORMAL", n_normal), ("PNEUMONIA", n_pneumonia)):
            train = math.floor(0.8 * n + 1e-9)
            val = math.floor(0.1 * n + 1e-9)
            assert counts["TRAIN"][label] == train
            assert counts["VAL"][label] == val
            assert counts["TEST"][label] == n - train - val
            assert counts["TEST"][label] >= 1

    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_every_record_assigned_exactly_once(self, seed):
        base = synthetic_records(23, 31)
        out = stratified_split(base, seed=seed)
        seen = [r.id for r in out.records]
        assert sorted(seen) == sorted(base.ids)
        for split in (SplitName.TRAIN, SplitName.VAL, SplitName.TEST):
            for rec in out.records_in(split):
                assert rec.split is split


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        manifest = stratified_split(synthetic_records(10, 12), seed=9)
        path = tmp_path / "manifest.csv"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.seed == manifest.seed
        assert loaded.ratios == manifest.ratios
        assert [(r.id, r.label, r.split) for r in loaded.records] == [
            (r.id, r.label, r.split) for r in manifest.records
        ]

    def test_csv_header(self, tmp_path):
        manifest = stratified_split(synthetic_records(5, 5))
        path = tmp_path / "manifest.csv"
        save_manifest(manifest, path)
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        assert header == ["id", "label", "split"]

    def test_sidecar_counts(self, tmp_path):
        manifest = stratified_split(synthetic_records(10, 10))
        path = tmp_path / "manifest.csv"
        save_manifest(manifest, path)
        sidecar = path.with_suffix(".json")
        assert sidecar.is_file()
        import json

        payload = json.loads(sidecar.read_text())
        assert payload["seed"] == 42
        assert payload["counts"]["TRAIN"]["NORMAL"] == 8

    def test_hash_tracks_content(self, tmp_path):
        m1 = stratified_split(synthetic_records(10, 10), seed=1)
        m2 = stratified_split(synthetic_records(10, 10), seed=2)
        p1, p2, p3 = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
        save_manifest(m1, p1)
        save_manifest(m1, p2)
        save_manifest(m2, p3)
        assert manifest_hash(p1) == manifest_hash(p2)
        assert manifest_hash(p1) != manifest_hash(p3)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            load_manifest(tmp_path / "absent.csv")


class TestPreprocess:
    def test_uniform_white_standardizes_to_known_values(self):
        # (1 - mean) / std per channel
        img = torch.ones(3, 8, 8)
        out = standardize(img, PreprocessConfig(target_size=8))
        expected = (2.2489, 2.4286, 2.6400)
        for ch, want in enumerate(expected):
            assert out[ch].max().item() == pytest.approx(want, abs=5e-4)
            assert out[ch].min().item() == pytest.approx(want, abs=5e-4)

    def test_red_mean_gray_zeroes_red_channel(self):
        arr = np.full((10, 10), 0.485, dtype=np.float32)
        unit = to_unit_tensor(arr, 10)
        out = standardize(unit, PreprocessConfig(target_size=10))
        assert out[0].abs().max().item() < 1e-5

    def test_grayscale_file_becomes_3x224x224(self, tmp_path):
        arr = (np.random.default_rng(0).random((400, 500)) * 255).astype(np.uint8)
        path = tmp_path / "gray.png"
        Image.fromarray(arr, mode="L").save(path)
        out = preprocess_image(Image.open(path), PreprocessConfig())
        assert out.shape == (3, 224, 224)
        assert out.dtype == torch.float32

    def test_grayscale_replicated_across_channels(self):
        arr = np.random.default_rng(1).random((32, 32)).astype(np.float32)
        unit = to_unit_tensor(arr, 32)
        assert torch.equal(unit[0], unit[1])
        assert torch.equal(unit[1], unit[2])

    def test_destandardize_round_trip(self):
        cfg = PreprocessConfig(target_size=32)
        unit = to_unit_tensor(
            np.random.default_rng(2).random((50, 40)).astype(np.float32), 32
        )
        back = destandardize(standardize(unit, cfg), cfg)
        assert (back - unit).abs().max().item() < 1e-6

    def test_unit_range_enforced(self):
        unit = to_unit_tensor(np.random.default_rng(3).random((20, 20)), 20)
        assert unit.min().item() >= 0.0
        assert unit.max().item() <= 1.0

    def test_bad_target_size(self):
        with pytest.raises(DatasetError):
            PreprocessConfig(target_size=0)

    def test_decode_error_names_record(self, tmp_path):
        bad = tmp_path / "bad.jpeg"
        bad.write_bytes(b"junk")
        from pneumoxray import load_image

        with pytest.raises(ImageDecodeError, match="PNEUMONIA/bad.jpeg"):
            load_image(bad, source="PNEUMONIA/bad.jpeg")


class TestAugment:
    def test_identity_policy_is_exact(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(0))
        out = augment_image(img, AugmentPolicy.identity(), augment_generator(1, "r", 1))
        assert torch.equal(out, img)

    def test_hflip_only_is_involution(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(1))
        policy = AugmentPolicy(
            hflip_prob=1.0,
            max_rotation_deg=0.0,
            max_translate_frac=0.0,
            scale_range=(1.0, 1.0),
            jitter_frac=0.0,
        )
        once = augment_image(img, policy, augment_generator(1, "r", 1))
        twice = augment_image(once, policy, augment_generator(1, "r", 1))
        assert torch.equal(once, torch.flip(img, dims=[-1]))
        assert torch.equal(twice, img)

    def test_deterministic_for_fixed_key(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(2))
        a = augment_image(img, AugmentPolicy(), augment_generator(42, "rec", 3))
        b = augment_image(img, AugmentPolicy(), augment_generator(42, "rec", 3))
        assert torch.equal(a, b)

    def test_epoch_changes_draws(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(3))
        a = augment_image(img, AugmentPolicy(), augment_generator(42, "rec", 3))
        b = augment_image(img, AugmentPolicy(), augment_generator(42, "rec", 4))
        assert not torch.equal(a, b)

    def test_record_changes_draws(self):
        img = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(4))
        a = augment_image(img, AugmentPolicy(), augment_generator(42, "rec_a", 3))
        b = augment_image(img, AugmentPolicy(), augment_generator(42, "rec_b", 3))
        assert not torch.equal(a, b)

    def test_draw_stream_independent_of_magnitudes(self):
        # zeroing individual magnitudes must not change how many draws are
        # consumed, or records would desynchronize across policy tweaks
        img = torch.full((3, 48, 48), 0.5)
        policies = [
            AugmentPolicy(),
            AugmentPolicy.identity(),
            AugmentPolicy(
                hflip_prob=0.0,
                max_rotation_deg=0.0,
                max_translate_frac=0.1,
                scale_range=(1.0, 1.0),
                jitter_frac=0.2,
            ),
        ]
        states = []
        for policy in policies:
            rng = augment_generator(7, "x", 1)
            augment_image(img, policy, rng)
            states.append(rng.get_state())
        assert all(torch.equal(s, states[0]) for s in states[1:])

    def test_brightness_scales_pixels(self):
        img = torch.full((3, 16, 16), 0.5)
        policy = AugmentPolicy(
            hflip_prob=0.0,
            max_rotation_deg=0.0,
            max_translate_frac=0.0,
            scale_range=(1.0, 1.0),
            jitter_frac=0.2,
        )
        out = augment_image(img, policy, augment_generator(9, "x", 1))
        # constant image: contrast is a no-op around the mean, so the output
        # is 0.5 * brightness factor, uniform
        assert out.std().item() < 1e-6
        factor = out.mean().item() / 0.5
        assert 0.8 <= factor <= 1.2

    def test_policy_validation(self):
        with pytest.raises(DatasetError):
            AugmentPolicy(hflip_prob=1.5)
        with pytest.raises(DatasetError):
            AugmentPolicy(scale_range=(1.1, 0.9))
        with pytest.raises(DatasetError):
            AugmentPolicy(jitter_frac=-0.1)

    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_output_shape_and_finite(self, seed):
        img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(seed))
        out = augment_image(img, AugmentPolicy(), augment_generator(seed, "p", 2))
        assert out.shape == img.shape
        assert torch.isfinite(out).all()


class TestDatasets:
    def test_train_only_augmentation(self, small_root):
        manifest = stratified_split(scan_dataset_dir(small_root))
        datasets = make_datasets(
            manifest, small_root, PreprocessConfig(target_size=48), AugmentPolicy()
        )
        assert datasets[SplitName.TRAIN].augmented
        assert not datasets[SplitName.VAL].augmented
        assert not datasets[SplitName.TEST].augmented

    def test_item_structure(self, small_root):
        manifest = stratified_split(scan_dataset_dir(small_root))
        datasets = make_datasets(manifest, small_root, PreprocessConfig(target_size=48))
        ds = datasets[SplitName.TEST]
        tensor, label_idx, rec_id = ds[0]
        assert tensor.shape == (3, 48, 48)
        assert label_idx in (0, 1)
        assert isinstance(rec_id, str)

    def test_label_index_mapping(self, small_root):
        manifest = stratified_split(scan_dataset_dir(small_root))
        datasets = make_datasets(manifest, small_root, PreprocessConfig(target_size=48))
        ds = datasets[SplitName.TEST]
        for i in range(len(ds)):
            _, label_idx, rec_id = ds[i]
            expected = 1 if rec_id.startswith("PNEUMONIA/") else 0
            assert label_idx == expected

    def test_eval_splits_deterministic(self, small_root):
        manifest = stratified_split(scan_dataset_dir(small_root))
        datasets = make_datasets(manifest, small_root, PreprocessConfig(target_size=48))
        ds = datasets[SplitName.VAL]
        a, _, _ = ds[0]
        b, _, _ = ds[0]
        assert torch.equal(a, b)

    def test_train_epoch_changes_sample(self, small_root):
        manifest = stratified_split(scan_dataset_dir(small_root))
        datasets = make_datasets(
            manifest, small_root, PreprocessConfig(target_size=48), AugmentPolicy()
        )
        ds = datasets[SplitName.TRAIN]
        ds.set_epoch(1)
        a, _, _ = ds[0]
        ds.set_epoch(2)
        b, _, _ = ds[0]
        assert not torch.equal(a, b)

    def test_train_sample_matches_manual_pipeline(self, small_root):
        from pneumoxray.data import LABEL_INDEX, load_image

        manifest = stratified_split(scan_dataset_dir(small_root))
        cfg = PreprocessConfig(target_size=48)
        policy = AugmentPolicy()
        datasets = make_datasets(manifest, small_root, cfg, policy, seed=42)
        ds = datasets[SplitName.TRAIN]
        ds.set_epoch(5)
        got, _, rec_id = ds[0]

        raw = load_image(Path(small_root) / rec_id)
        unit = to_unit_tensor(raw, cfg.target_size)
        unit = augment_image(unit, policy, augment_generator(42, rec_id, 5))
        want = standardize(unit, cfg)
        assert torch.equal(got, want)

    def test_unassigned_manifest_rejected(self, small_root):
        manifest = scan_dataset_dir(small_root)
        with pytest.raises(DatasetError):
            make_datasets(manifest, small_root, PreprocessConfig(target_size=48))


def test_jpeg_extension_scanned(tmp_path):
    root = make_image_tree(tmp_path / "data", per_class=3, size=32, extension="jpeg")
    manifest = scan_dataset_dir(root)
    assert len(manifest.records) == 6
