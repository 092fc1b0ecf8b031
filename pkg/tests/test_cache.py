import os
import pickle
import time

import numpy as np
import pytest

from hpscatter.cache import (
    DIR_PREFIX,
    CacheFormatError,
    HMatrixCache,
    config_key,
    is_dump_fresh,
    load_hmatrix,
    save_hmatrix,
)
from hpscatter.cluster_tree import build_tree, partition_blocks
from hpscatter.hmatrix import AcaConfig, DenseKernelSampler, assemble_hmatrix


@pytest.fixture
def small_hmatrix(rng):
    points = rng.uniform(0.0, 1.0, (40, 3))
    dist = np.linalg.norm(points[:, None] - points[None], axis=2)
    z = 1.0 / (dist + 1.0)
    tree = build_tree(points, wavelength=1.0, leaf_factor=0.3)
    return assemble_hmatrix(DenseKernelSampler(z), tree, partition_blocks(tree), AcaConfig(tolerance=1e-6))


def test_config_key_is_stable_and_order_free():
    a = config_key({"frequency": 3e8, "eta": 1.0, "mesh": "abc"})
    b = config_key({"mesh": "abc", "eta": 1.0, "frequency": 3e8})
    assert a == b
    assert a != config_key({"mesh": "abc", "eta": 2.0, "frequency": 3e8})


def test_dump_round_trip_keeps_products(tmp_path, small_hmatrix, rng):
    path = str(tmp_path / "h.pkl")
    save_hmatrix(small_hmatrix, path, key="k1")
    loaded, key = load_hmatrix(path)
    assert key == "k1"
    x = rng.standard_normal(small_hmatrix.n)
    assert np.array_equal(loaded.matvec(x), small_hmatrix.matvec(x))


def test_foreign_pickle_is_rejected(tmp_path):
    path = tmp_path / "other.pkl"
    with open(path, "wb") as handle:
        pickle.dump({"something": "else"}, handle)
    with pytest.raises(CacheFormatError):
        load_hmatrix(str(path))


def test_freshness():
    assert is_dump_fresh(time.time() - 10, max_age_seconds=60)
    assert not is_dump_fresh(time.time() - 120, max_age_seconds=60)


def test_cache_save_then_load(tmp_path, small_hmatrix):
    cache = HMatrixCache(str(tmp_path))
    assert cache.load("abc") is None
    target = cache.save("abc", small_hmatrix)
    assert os.path.basename(os.path.dirname(target)).startswith(DIR_PREFIX)
    loaded = cache.load("abc")
    assert loaded is not None
    assert loaded.n == small_hmatrix.n
    assert cache.load("other") is None


def test_stale_entries_are_ignored(tmp_path, small_hmatrix):
    old = tmp_path / f"{DIR_PREFIX}2001-01-01-00-00-00"
    old.mkdir()
    save_hmatrix(small_hmatrix, str(old / "abc.pkl"), key="abc")
    cache = HMatrixCache(str(tmp_path), max_age_seconds=3600)
    assert cache.get_newest("abc")[0] == str(old / "abc.pkl")
    assert cache.load("abc") is None


def test_saving_again_removes_superseded_dumps(tmp_path, small_hmatrix):
    old = tmp_path / f"{DIR_PREFIX}2001-01-01-00-00-00"
    old.mkdir()
    save_hmatrix(small_hmatrix, str(old / "abc.pkl"), key="abc")
    save_hmatrix(small_hmatrix, str(old / "keep.pkl"), key="keep")
    HMatrixCache(str(tmp_path)).save("abc", small_hmatrix)
    assert not (old / "abc.pkl").exists()
    assert (old / "keep.pkl").exists()


def test_wrong_key_inside_dump_is_ignored(tmp_path, small_hmatrix):
    cache = HMatrixCache(str(tmp_path))
    target = cache.save("abc", small_hmatrix)
    save_hmatrix(small_hmatrix, target, key="tampered")
    assert cache.load("abc") is None
