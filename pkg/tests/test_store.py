import torch

from nextscale_seg.store import PyramidStore, _get_cache_id, autoencoder_fingerprint


def _masks(n=3, seed=0):
    return (torch.rand(n, 32, 32, generator=torch.Generator().manual_seed(seed)) > 0.5).to(torch.uint8)


def test_cache_id_is_stable():
    assert _get_cache_id("abc", "case_00001", 0, 0) == _get_cache_id("abc", "case_00001", 0, 0)
    assert _get_cache_id("abc", "case_00001", 0, 0) != _get_cache_id("abc", "case_00001", 1, 0)
    assert _get_cache_id("abc", "case_00001", 0, 0) != _get_cache_id("abd", "case_00001", 0, 0)


def test_pyramids_match_quantization(tiny_models):
    ae = tiny_models.autoencoder
    store = PyramidStore(ae)
    masks = _masks()
    keys = [("case_{}".format(i), 0, 0) for i in range(3)]
    pyramid = store.pyramids(keys, masks)
    with torch.no_grad():
        expected = ae.quantize_pyramid(ae.encode(masks))
    assert pyramid.equal(expected)
    assert (store.hits, store.misses) == (0, 3)
    again = store.pyramids(keys[::-1], masks.flip(0))
    assert again.equal(expected.select(torch.tensor([2, 1, 0])))
    assert (store.hits, store.misses) == (3, 3)


def test_partial_hits(tiny_models):
    store = PyramidStore(tiny_models.autoencoder)
    masks = _masks()
    store.pyramids([("a", 0, 0)], masks[:1])
    store.pyramids([("a", 0, 0), ("b", 0, 0)], masks[:2])
    assert (store.hits, store.misses) == (1, 2)
    assert store.has("b", 0, 0) and not store.has("c", 0, 0)


def test_file_system_store_persists(tiny_models, tmp_path):
    ae = tiny_models.autoencoder
    masks = _masks(2)
    keys = [("x", 1, 0), ("y", 0, 0)]
    first = PyramidStore(ae, str(tmp_path / "cache")).pyramids(keys, masks)
    second = PyramidStore(ae, str(tmp_path / "cache"))
    pyramid = second.pyramids(keys, masks)
    assert pyramid.equal(first)
    assert (second.hits, second.misses) == (2, 0)


def test_weight_change_invalidates(tiny_models, tmp_path):
    ae = tiny_models.autoencoder
    before = autoencoder_fingerprint(ae)
    PyramidStore(ae, str(tmp_path)).pyramids([("x", 0, 0)], _masks(1))
    with torch.no_grad():
        ae.decoder.net[0].bias.add_(1.0)
    assert autoencoder_fingerprint(ae) != before
    store = PyramidStore(ae, str(tmp_path))
    assert store.get("x", 0, 0) is None
