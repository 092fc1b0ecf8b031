"""
On-disk reuse of assembled H-matrices across CLI invocations.

A dump is a pickle of ``{"magic", "version", "key", "payload"}``. The cache
keeps dumps in timestamped ``hmat-%Y-%m-%d-%H-%M-%S`` directories, one file
per configuration hash; when a configuration is saved again the older
directories holding the same key are removed.
"""

import datetime
import hashlib
import json
import logging
import os
import pickle
import shutil
import time
from typing import Any, Dict, Optional, Tuple

from hpscatter.errors import HpScatterError
from hpscatter.hmatrix import HMatrix

logger = logging.getLogger(__name__)

DUMP_MAGIC = "hpscatter-hmatrix"
DUMP_VERSION = 2
DIR_PREFIX = "hmat-"
DIR_FORMAT = "%Y-%m-%d-%H-%M-%S"


class CacheFormatError(HpScatterError):
    pass


def config_key(settings: Dict[str, Any]) -> str:
    """Stable hash of the settings that determine the assembled matrix"""
    text = json.dumps(settings, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_hmatrix(h: HMatrix, path: str, key: str = "") -> None:
    with open(path, "wb") as handle:
        pickle.dump({"magic": DUMP_MAGIC, "version": DUMP_VERSION, "key": key, "payload": h}, handle)


def load_hmatrix(path: str) -> Tuple[HMatrix, str]:
    with open(path, "rb") as handle:
        data = pickle.load(handle)
    if not isinstance(data, dict) or data.get("magic") != DUMP_MAGIC:
        raise CacheFormatError(f"{path} is not an hpscatter H-matrix dump")
    if data.get("version") != DUMP_VERSION:
        raise CacheFormatError(f"{path} has dump version {data.get('version')}, expected {DUMP_VERSION}")
    return data["payload"], data.get("key", "")


def is_dump_fresh(timestamp: float, max_age_seconds: int = 3600) -> bool:
    """Check if a dump is fresh enough (less than max_age_seconds old)"""
    return time.time() - timestamp < max_age_seconds


class HMatrixCache:
    """Timestamped dump directories keyed by configuration hash"""

    def __init__(self, cache_dir: str, max_age_seconds: int = 3600):
        self.cache_dir = cache_dir
        self.max_age_seconds = max_age_seconds

    def _dirs(self):
        if not os.path.isdir(self.cache_dir):
            return []
        names = [d for d in os.listdir(self.cache_dir) if d.startswith(DIR_PREFIX)]
        return sorted((d for d in names if os.path.isdir(os.path.join(self.cache_dir, d))), reverse=True)

    @staticmethod
    def _timestamp(dirname: str) -> Optional[float]:
        try:
            return datetime.datetime.strptime(dirname[len(DIR_PREFIX):], DIR_FORMAT).timestamp()
        except ValueError:
            return None

    def get_newest(self, key: str) -> Tuple[Optional[str], Optional[float]]:
        """Path and timestamp of the newest dump for ``key``, or (None, None)"""
        for dirname in self._dirs():
            path = os.path.join(self.cache_dir, dirname, f"{key}.pkl")
            timestamp = self._timestamp(dirname)
            if timestamp is not None and os.path.exists(path):
                return path, timestamp
        return None, None

    def load(self, key: str) -> Optional[HMatrix]:
        path, timestamp = self.get_newest(key)
        if path is None:
            return None
        if not is_dump_fresh(timestamp, self.max_age_seconds):
            logger.info(f"Cached H-matrix {path} is stale; reassembling")
            return None
        try:
            h, stored_key = load_hmatrix(path)
        except (OSError, pickle.UnpicklingError, CacheFormatError) as e:
            logger.warning(f"⚠️  Ignoring unreadable cache entry {path}: {e}")
            return None
        if stored_key != key:
            logger.warning(f"⚠️  Cache entry {path} holds key {stored_key}, expected {key}")
            return None
        logger.info(f"📦 Loaded H-matrix from cache {path}")
        return h

    def save(self, key: str, h: HMatrix) -> str:
        now = datetime.datetime.now()
        folder = now.strftime(DIR_PREFIX + DIR_FORMAT)
        path = os.path.join(self.cache_dir, folder)
        os.makedirs(path, exist_ok=True)
        target = os.path.join(path, f"{key}.pkl")
        save_hmatrix(h, target, key)
        logger.info(f"Saved H-matrix to {target}")
        self._delete_old_dirs(key, except_dir=folder)
        return target

    def _delete_old_dirs(self, key: str, except_dir: str):
        """Drop superseded dumps of ``key`` and directories left empty"""
        for dirname in self._dirs():
            if dirname == except_dir:
                continue
            dirpath = os.path.join(self.cache_dir, dirname)
            stale = os.path.join(dirpath, f"{key}.pkl")
            try:
                if os.path.exists(stale):
                    os.remove(stale)
                if not os.listdir(dirpath):
                    shutil.rmtree(dirpath)
                    logger.debug(f"Deleted old cache directory: {dirname}")
            except OSError as e:
                logger.warning(f"⚠️  Failed to clean cache directory {dirname}: {e}")
