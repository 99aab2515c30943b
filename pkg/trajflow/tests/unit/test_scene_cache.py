"""
Unit tests for the decoded-scene LRU cache.
"""

import pytest

from app.services.pipeline import load_dataset
from app.services.scene_io import manifest_entry, save_scene, write_manifest
from app.utils import scene_cache
from app.utils.scene_cache import SceneCache, get_scene_cache

pytestmark = pytest.mark.scenegen


@pytest.fixture
def scene_dir(tiny_scene, tmp_path):
    return save_scene(tiny_scene, tmp_path / "scene_0000")


@pytest.fixture
def shared_cache(monkeypatch):
    cache = SceneCache(maxsize=8)
    monkeypatch.setattr(scene_cache, "_shared_cache", cache)
    return cache


def test_load_caches_scene(scene_dir):
    cache = SceneCache(maxsize=4)

    first = cache.load(scene_dir)
    second = cache.load(scene_dir)

    assert first is second
    assert scene_dir in cache
    stats = cache.get_stats()
    assert stats["hits"] == 1
    assert stats["misses"] == 1
    assert stats["hit_rate_percent"] == 50.0


def test_equivalent_paths_share_an_entry(scene_dir):
    cache = SceneCache()
    cache.load(scene_dir)

    assert cache.get(scene_dir.parent / "." / scene_dir.name) is not None
    assert len(cache) == 1


def test_lru_eviction(tiny_scene, tmp_path):
    cache = SceneCache(maxsize=2)
    for name in ("a", "b", "c"):
        cache.set(tmp_path / name, tiny_scene)

    assert len(cache) == 2
    assert cache.get(tmp_path / "a") is None
    assert cache.get(tmp_path / "c") is tiny_scene


def test_invalidate_and_clear(scene_dir):
    cache = SceneCache()
    cache.load(scene_dir)
    cache.invalidate(scene_dir)

    assert scene_dir not in cache

    cache.load(scene_dir)
    cache.clear()
    assert len(cache) == 0
    assert cache.get_stats()["total_requests"] == 0


def test_empty_cache_stats():
    stats = SceneCache(maxsize=8).get_stats()

    assert stats == {
        "size": 0,
        "maxsize": 8,
        "hits": 0,
        "misses": 0,
        "hit_rate_percent": 0,
        "total_requests": 0,
    }


# ===== Shared Cache Tests =====

def test_get_scene_cache_is_process_wide(shared_cache):
    assert get_scene_cache() is shared_cache
    assert get_scene_cache() is get_scene_cache()


def test_load_dataset_reuses_decoded_scenes(shared_cache, tiny_scene, tiny_scene_spec, scene_dir):
    write_manifest(scene_dir.parent, tiny_scene_spec, [manifest_entry(scene_dir.name, tiny_scene)])

    first = load_dataset(scene_dir.parent)
    second = load_dataset(scene_dir.parent)

    assert second[0][1] is first[0][1]
    assert shared_cache.get_stats()["misses"] == 1
    assert shared_cache.get_stats()["hits"] == 1


def test_explicit_cache_bypasses_shared_cache(shared_cache, tiny_scene, tiny_scene_spec, scene_dir):
    write_manifest(scene_dir.parent, tiny_scene_spec, [manifest_entry(scene_dir.name, tiny_scene)])
    private = SceneCache(maxsize=2)

    load_dataset(scene_dir.parent, private)

    assert len(private) == 1
    assert len(shared_cache) == 0
