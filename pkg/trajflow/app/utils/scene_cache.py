"""
Caching layer for decoded scenes.

Loading a scene decodes PNG frames and binary clouds. Every command run in a
process shares one cache, so the ablation rows and a train, sample, eval
sequence over the same dataset decode each scene once.
"""

import logging
import threading
from pathlib import Path
from typing import Any, Dict, Optional

from cachetools import LRUCache

from app.config.settings import settings
from app.services.scene_io import load_scene
from app.services.scenegen import SceneSample

logger = logging.getLogger(__name__)


class SceneCache:
    """
    LRU cache of SceneSample objects keyed by resolved scene directory.

    Tracks hit/miss statistics for cache effectiveness monitoring.
    """

    def __init__(self, maxsize: int = 64):
        """
        Initialize scene cache.

        Args:
            maxsize: Maximum number of cached scenes
        """
        self.cache: LRUCache = LRUCache(maxsize=maxsize)
        self.maxsize = maxsize
        self._lock = threading.Lock()

        # Statistics
        self.hits = 0
        self.misses = 0

        logger.debug(f"Initialized SceneCache: maxsize={maxsize}")

    @staticmethod
    def _key(directory: Path) -> str:
        return str(Path(directory).resolve())

    def get(self, directory: Path) -> Optional[SceneSample]:
        """
        Get a cached scene.

        Args:
            directory: Scene directory

        Returns:
            Cached SceneSample or None if not cached
        """
        key = self._key(directory)
        with self._lock:
            scene = self.cache.get(key)
            if scene is not None:
                self.hits += 1
            else:
                self.misses += 1
        logger.debug(f"Scene cache {'hit' if scene is not None else 'miss'} for {key}")
        return scene

    def set(self, directory: Path, scene: SceneSample) -> None:
        with self._lock:
            self.cache[self._key(directory)] = scene

    def load(self, directory: Path) -> SceneSample:
        """Return the cached scene or load it from disk and cache it."""
        scene = self.get(directory)
        if scene is None:
            scene = load_scene(directory)
            self.set(directory, scene)
        return scene

    def invalidate(self, directory: Path) -> None:
        """Drop a scene, e.g. after its directory was rewritten."""
        with self._lock:
            self.cache.pop(self._key(directory), None)

    def clear(self) -> None:
        """Clear all cached entries."""
        with self._lock:
            self.cache.clear()
            self.hits = 0
            self.misses = 0
        logger.debug("Scene cache cleared")

    def get_stats(self) -> Dict[str, Any]:
        """
        Get cache statistics.

        Returns:
            Dictionary with size, maxsize, hits, misses, hit_rate_percent
            and total_requests
        """
        total_requests = self.hits + self.misses
        hit_rate = (self.hits / total_requests * 100) if total_requests > 0 else 0
        return {
            "size": len(self.cache),
            "maxsize": self.maxsize,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate_percent": round(hit_rate, 2),
            "total_requests": total_requests,
        }

    def log_stats(self) -> None:
        """Log current cache statistics."""
        stats = self.get_stats()
        logger.info(
            f"Scene cache stats: {stats['size']}/{stats['maxsize']} entries, "
            f"{stats['hits']} hits, {stats['misses']} misses, "
            f"{stats['hit_rate_percent']}% hit rate"
        )

    def __len__(self) -> int:
        return len(self.cache)

    def __contains__(self, directory: Path) -> bool:
        return self._key(directory) in self.cache


_shared_cache: Optional[SceneCache] = None
_shared_lock = threading.Lock()


def get_scene_cache() -> SceneCache:
    """Process-wide scene cache, sized by settings.scene_cache_size."""
    global _shared_cache
    with _shared_lock:
        if _shared_cache is None:
            _shared_cache = SceneCache(settings.scene_cache_size)
        return _shared_cache
