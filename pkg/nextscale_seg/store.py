import hashlib
import json
import logging

import torch

from flask_caching.backends import FileSystemCache, SimpleCache

from .autoencoder import TokenPyramid

logger = logging.getLogger(__name__)

# Cached values are lists of numpy token maps; SimpleCache keeps at most this many before pruning.
MEMORY_THRESHOLD = 1 << 20


def autoencoder_fingerprint(autoencoder):
    """md5 over the autoencoder parameters; any change to the frozen weights invalidates cached pyramids."""
    digest = hashlib.md5()
    for name, tensor in sorted(autoencoder.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _get_cache_id(fingerprint, case_id, annotator, class_id):
    all_args = [fingerprint, case_id, int(annotator), int(class_id)]
    return hashlib.md5(json.dumps(all_args).encode()).hexdigest()


class PyramidStore:
    """
    Target token pyramids of the frozen autoencoder, keyed by (autoencoder fingerprint, case, annotator, class).
    Backed by a file system cache when a directory is given, in memory otherwise.
    """

    def __init__(self, autoencoder, cache_dir=None):
        self.autoencoder = autoencoder
        self.fingerprint = autoencoder_fingerprint(autoencoder)
        if cache_dir is not None:
            self.backend = FileSystemCache(cache_dir, threshold=0, default_timeout=0)
        else:
            self.backend = SimpleCache(threshold=MEMORY_THRESHOLD, default_timeout=0)
        self.hits, self.misses = 0, 0

    def get(self, case_id, annotator, class_id):
        maps = self.backend.get(_get_cache_id(self.fingerprint, case_id, annotator, class_id))
        if maps is None:
            return None
        return TokenPyramid([torch.from_numpy(m) for m in maps])

    def set(self, case_id, annotator, class_id, pyramid):
        """:param pyramid: TokenPyramid of a single mask (batch size 1)"""
        maps = [m.cpu().numpy() for m in pyramid]
        self.backend.set(_get_cache_id(self.fingerprint, case_id, annotator, class_id), maps)

    def has(self, case_id, annotator, class_id):
        return self.backend.has(_get_cache_id(self.fingerprint, case_id, annotator, class_id))

    @torch.no_grad()
    def pyramids(self, keys, masks):
        """
        Target pyramids for a batch, quantizing only the masks that are not cached yet.
        :param keys: list of (case_id, annotator, class_id)
        :param masks: binary masks [B, H, W] matching keys
        :return: TokenPyramid with batch size B
        """
        found = [self.get(*key) for key in keys]
        missing = [i for i, p in enumerate(found) if p is None]
        if missing:
            ae = self.autoencoder
            computed = ae.quantize_pyramid(ae.encode(masks[missing]))
            for slot, i in enumerate(missing):
                single = computed.select(slice(slot, slot + 1))
                self.set(*keys[i], single)
                found[i] = single
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)
        return TokenPyramid.concat(found)
