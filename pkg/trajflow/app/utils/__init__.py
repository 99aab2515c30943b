"""
Utility modules for trajflow.
"""

from app.utils.scene_cache import SceneCache, get_scene_cache

__all__ = ["SceneCache", "get_scene_cache"]
