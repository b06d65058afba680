"""Content-addressed cache of featurized clips."""

import hashlib
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .audio import decode_wav_bytes
from .melspec import MelParams, featurize, tensor_bytes, tensor_from_bytes

_CACHE_FORMAT = 1


def thread_count():
    try:
        return max(1, int(os.environ.get("SER_THREADS", "1")))
    except ValueError:
        return 1


class FeatureStore:
    """Maps clip paths to spectrogram images.

    Keys are the SHA-256 of the file bytes and the mel parameters, so an
    unchanged clip is never featurized twice. With ``cache_dir`` set, images
    persist as MELT tensor files; ``hits``/``misses`` count lookups.
    """

    def __init__(self, params=MelParams(), cache_dir=None):
        self.params = params
        self.cache_dir = cache_dir
        self.hits = 0
        self.misses = 0
        self._memory = {}
        self._lock = threading.Lock()
        self._param_tag = json.dumps({"mel": params.to_dict(), "format": _CACHE_FORMAT}, sort_keys=True).encode()
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)

    def key(self, data):
        return hashlib.sha256(self._param_tag + data).hexdigest()

    def get(self, path):
        with open(path, "rb") as fh:
            data = fh.read()
        key = self.key(data)
        with self._lock:
            if key in self._memory:
                self.hits += 1
                return self._memory[key]
        cached = os.path.join(self.cache_dir, key + ".melt") if self.cache_dir else None
        if cached and os.path.exists(cached):
            with open(cached, "rb") as fh:
                img = tensor_from_bytes(fh.read())
            hit = True
        else:
            img = featurize(decode_wav_bytes(data, str(path)), self.params)
            if cached:
                tmp = cached + f".{os.getpid()}.{threading.get_ident()}.tmp"
                with open(tmp, "wb") as fh:
                    fh.write(tensor_bytes(img))
                os.replace(tmp, cached)
            hit = False
        with self._lock:
            self._memory[key] = img
            if hit:
                self.hits += 1
            else:
                self.misses += 1
        return img

    def images(self, manifest, threads=None):
        """Stacked ``[n, 224, 224, 3]`` images in manifest order."""
        paths = [e.clip_path for e in manifest]
        threads = threads or thread_count()
        if threads > 1 and len(paths) > 1:
            with ThreadPoolExecutor(threads) as pool:
                imgs = list(pool.map(self.get, paths))
        else:
            imgs = [self.get(p) for p in paths]
        if not imgs:
            return np.zeros((0, 224, 224, 3), dtype=np.float32)
        return np.stack(imgs).astype(np.float32, copy=False)

    def stats(self):
        return {"hits": self.hits, "misses": self.misses}
