import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from trangcn.data import (POSE_BENCHMARK, export_dataset, generate_synthetic, load_dataset_dir, load_market_dir,
                          parse_market_name, pose_targets)
from trangcn.errors import ConfigError, IngestionError
from trangcn.metrics import RetrievalRun, cmc_at_k
from trangcn.pose import COCO_LIMBS

MARKET_FIXTURE = {
    "bounding_box_train": ["0002_c1s1_000451_03.jpg", "0007_c2s3_070952_01.jpg", "0007_c3s3_071002_02.jpg"],
    "query": ["0002_c3s1_000551_00.jpg"],
    "bounding_box_test": ["-1_c1s1_000401_03.jpg", "0000_c6s1_002546_01.jpg"],
}


def test_generation_is_deterministic():
    a = generate_synthetic(8, 16, (64, 32), 3)
    b = generate_synthetic(8, 16, (64, 32), 3)
    for sa, sb in zip(a.splits(), b.splits()):
        assert np.array_equal(sa.images, sb.images)
        assert np.array_equal(sa.ids, sb.ids) and np.array_equal(sa.cams, sb.cams)
        assert np.array_equal(sa.gt_S, sb.gt_S) and np.array_equal(sa.gt_affinity, sb.gt_affinity)
    assert not np.array_equal(a.train.images, generate_synthetic(8, 16, (64, 32), 4).train.images)


def test_split_sizes_and_cameras():
    ds = generate_synthetic(8, 16, (64, 32), 3)
    assert ds.train.images.shape == (64, 64, 32, 3)
    assert len(ds.query) == 8 and len(ds.gallery) == 56
    assert set(ds.gallery.cams.tolist()) == {1, 2}
    assert ds.train.gt_S.shape == (64, 18, 2, 1)
    assert ds.train.gt_affinity.shape == (64, len(COCO_LIMBS))


def test_no_occlusion_all_limbs_present():
    ds = generate_synthetic(4, 6, (64, 32), 0, "default", occlusion=0.0)
    for split in ds.splits():
        assert np.all(split.gt_affinity == 1.0)


def test_occluded_limbs_are_zero():
    joints = np.array([[10.0, 10.0]] * 18)
    _, aff = pose_targets(joints, (0, 0, 20, 20), (64, 32))
    assert np.all(aff == 0.0)


@pytest.mark.parametrize("size", [(64, 32), (128, 64), (256, 128)])
def test_targets_peak_at_joint_cell(size):
    ds = generate_synthetic(3, 4, size, 1, "default")
    rng = np.random.default_rng(0)
    joints = rng.uniform(0, 1, (18, 2)) * size
    S, _ = pose_targets(joints, None, size)
    for k in range(18):
        cell = np.unravel_index(np.argmax(S[k]), S[k].shape)
        assert cell == (int(joints[k, 0] // 32), int(joints[k, 1] // 32))
        assert S[k][cell] == 1.0
    assert ds.train.gt_S.max() == 1.0


def test_raw_pixel_retrieval_on_easy_set():
    ds = generate_synthetic(8, 16, (64, 32), 3, "easy")
    flat = lambda s: s.images.reshape(len(s), -1).astype(np.float64)
    run = RetrievalRun(flat(ds.query), flat(ds.gallery), ds.query.ids, ds.gallery.ids, ds.query.cams,
                       ds.gallery.cams)
    assert cmc_at_k(run, 1) == 1.0


def test_pose_benchmark_pairs_share_appearance():
    ds = generate_synthetic(seed=0, **POSE_BENCHMARK)
    assert ds.num_train_ids == 16
    assert ds.info["shared_appearance"] == 2


def test_bad_generator_arguments():
    with pytest.raises(ConfigError):
        generate_synthetic(1, 16)
    with pytest.raises(ConfigError):
        generate_synthetic(4, 2)
    with pytest.raises(ConfigError):
        generate_synthetic(4, 4, (60, 32))
    with pytest.raises(ConfigError):
        generate_synthetic(4, 4, preset="nope")
    with pytest.raises(ConfigError):
        generate_synthetic(4, 4, blur=1.0)


def test_export_round_trip(tmp_path):
    ds = generate_synthetic(3, 4, (64, 32), 2, "default")
    export_dataset(ds, tmp_path)
    back = load_dataset_dir(tmp_path)
    for a, b in zip(ds.splits(), back.splits()):
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.ids, b.ids) and np.array_equal(a.cams, b.cams)
        assert np.array_equal(a.gt_S, b.gt_S)
    assert len(list((tmp_path / "train").glob("*.png"))) == len(ds.train)


def make_market(root: Path, tree=MARKET_FIXTURE):
    for sub, names in tree.items():
        (root / sub).mkdir(parents=True, exist_ok=True)
        for i, name in enumerate(names):
            Image.new("RGB", (64, 128), (10 * i, 20, 30)).save(root / sub / name)
    return root


def test_market_filename_grammar():
    assert parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1)
    assert parse_market_name("-1_c1s1_000401_03.jpg") == (-1, 1)
    assert parse_market_name("Thumbs.db") is None


def test_market_fixture_tree(tmp_path):
    ds = load_market_dir(make_market(tmp_path))
    assert len(ds.train) == 3 and ds.num_train_ids == 2
    assert sorted(set(ds.train.ids.tolist())) == [0, 1]
    assert ds.info["train_id_map"] == {2: 0, 7: 1}
    assert ds.train.cams.tolist() == [1, 2, 3]
    assert len(ds.query) == 1 and ds.query.ids.tolist() == [2]
    assert ds.gallery.ids.tolist() == [0]  # junk dropped, distractor kept
    assert ds.info["junk"] == 1
    for split in ds.splits():
        assert len(set(split.paths)) == len(split.paths)
    imgs = ds.train.load_images((128, 64))
    assert imgs.shape == (3, 128, 64, 3)


def test_market_skips_unparsable(tmp_path):
    root = make_market(tmp_path)
    Image.new("RGB", (8, 8)).save(root / "query" / "notes.jpg")
    (root / "query" / "readme.txt").write_text("x")
    ds = load_market_dir(root)
    assert len(ds.query) == 1 and ds.info["skipped_unparsable"] == 1


def test_market_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_market_dir(tmp_path)
    with pytest.raises(IngestionError):
        load_market_dir(tmp_path / "missing")


@pytest.mark.skipif(not os.environ.get("MARKET1501_ROOT"), reason="set MARKET1501_ROOT to a Market-1501 root")
def test_genuine_market_counts():
    ds = load_market_dir(os.environ["MARKET1501_ROOT"])
    assert len(ds.train) == 12936 and ds.num_train_ids == 751
    assert len(ds.query) == 3368
    assert len(ds.gallery) == 15913
