import pytest
import torch

from nextscale_seg.autoencoder import MaskAutoencoder, ScaleSchedule, TokenPyramid, interpolate
from nextscale_seg.codebook import lookup, quantize
from nextscale_seg.errors import InvalidInputError


@pytest.fixture
def autoencoder():
    torch.manual_seed(0)
    return MaskAutoencoder(image_size=32, latent_size=4, code_dim=4, codebook_size=16, hidden=8,
                           schedule=ScaleSchedule.default(4, 3)).double()


def _masks(n=3, size=32, seed=0):
    return (torch.rand(n, size, size, generator=torch.Generator().manual_seed(seed)) > 0.5).long()


def test_default_schedule():
    schedule = ScaleSchedule.default(16)
    assert schedule.resolutions == ((1, 1), (2, 2), (3, 3), (4, 4), (6, 6), (8, 8), (12, 12), (16, 16))
    assert schedule.token_count == 530
    assert schedule.offsets[1] == (1, 5)
    assert schedule.scale_ids().tolist()[:6] == [0, 1, 1, 1, 1, 2]


def test_schedule_validation():
    with pytest.raises(InvalidInputError):
        ScaleSchedule(((2, 2), (1, 1)))
    with pytest.raises(InvalidInputError):
        ScaleSchedule(())
    assert ScaleSchedule.single(16).K == 1


def test_interpolate_identity_and_shape():
    x = torch.randn(2, 3, 4, 4)
    assert interpolate(x, (4, 4)) is x
    assert interpolate(x, (2, 3)).shape == (2, 3, 2, 3)
    assert interpolate(x[0], (8, 8)).shape == (3, 8, 8)


def test_interpolate_keeps_corners():
    x = torch.arange(4.0).view(1, 1, 2, 2)
    up = interpolate(x, (5, 5))
    assert up[0, 0, 0, 0] == 0 and up[0, 0, -1, -1] == 3
    assert up[0, 0, 0, 2] == pytest.approx(0.5)


def test_pyramid_structure(autoencoder):
    out = autoencoder(_masks())
    pyramid = out["pyramid"]
    assert len(pyramid) == 3
    assert pyramid.resolutions == [(2, 2), (3, 3), (4, 4)]
    assert out["feature"].shape == (3, 4, 4, 4)
    assert all(m.dtype == torch.long for m in pyramid)


def test_quantize_dequantize_composition_is_exact(autoencoder):
    with torch.no_grad():
        m = autoencoder.encode(_masks())
        pyramid, residual = autoencoder.quantize_pyramid(m, return_residual=True)
        assert torch.equal(residual, m - autoencoder.dequantize_pyramid(pyramid))


def test_partial_dequantize_is_cumulative(autoencoder):
    with torch.no_grad():
        pyramid = autoencoder.quantize_pyramid(autoencoder.encode(_masks()))
        partial = autoencoder.partial_dequantize(pyramid)
        assert len(partial) == 3
        step = partial[1] - partial[0]
        assert torch.allclose(step, autoencoder.scale_contribution(1, pyramid[1]))
        assert torch.equal(autoencoder.partial_dequantize(pyramid.truncate(2))[-1], partial[1])


def test_refiners_start_as_identity(autoencoder):
    tokens = torch.randint(16, (2, 3, 3))
    with torch.no_grad():
        expected = interpolate(lookup(tokens, autoencoder.codebook), (4, 4))
        assert torch.allclose(autoencoder.scale_contribution(1, tokens), expected)


def test_single_code_feature_quantizes_exactly():
    torch.manual_seed(0)
    ae = MaskAutoencoder(image_size=32, latent_size=4, code_dim=4, codebook_size=16, hidden=8,
                         schedule=ScaleSchedule.single(4), refiner="identity").double()
    tokens = torch.randint(16, (2, 4, 4))
    with torch.no_grad():
        feature = lookup(tokens, ae.codebook)
        pyramid, residual = ae.quantize_pyramid(feature, return_residual=True)
    assert torch.equal(pyramid[0], tokens)
    assert residual.abs().max() == 0


def test_flatten_round_trip(autoencoder):
    pyramid = autoencoder.quantize_pyramid(autoencoder.encode(_masks(2)))
    flat = pyramid.flatten()
    assert flat.shape == (2, autoencoder.schedule.token_count)
    assert TokenPyramid.from_flat(flat, autoencoder.schedule).equal(pyramid)


def test_reconstruct_range(autoencoder):
    with torch.no_grad():
        out = autoencoder.reconstruct(_masks(2))
        coarse = autoencoder.reconstruct(_masks(2), scales=1)
    assert out.shape == (2, 1, 32, 32) and coarse.shape == out.shape
    assert out.min() >= 0 and out.max() <= 1


def test_mask_validation(autoencoder):
    with pytest.raises(InvalidInputError, match="binary"):
        autoencoder.encode(torch.full((1, 32, 32), 0.5))
    with pytest.raises(InvalidInputError):
        autoencoder.encode(torch.zeros(1, 16, 16))


def test_pyramid_validation(autoencoder):
    bad = TokenPyramid([torch.zeros(1, 3, 3, dtype=torch.long)])
    with pytest.raises(InvalidInputError):
        autoencoder.dequantize_pyramid(bad)
    with pytest.raises(InvalidInputError):
        autoencoder.quantize_pyramid(torch.zeros(1, 4, 2, 2, dtype=torch.float64))


def test_latent_must_divide_image():
    with pytest.raises(InvalidInputError):
        MaskAutoencoder(image_size=32, latent_size=12)


def test_encode_is_deterministic(autoencoder):
    masks = _masks()
    with torch.no_grad():
        assert torch.equal(autoencoder.encode(masks), autoencoder.encode(masks))


def test_single_scale_pyramid_is_plain_quantization():
    torch.manual_seed(0)
    ae = MaskAutoencoder(image_size=32, latent_size=4, code_dim=4, codebook_size=16, hidden=8,
                         schedule=ScaleSchedule.single(4)).double()
    with torch.no_grad():
        feature = ae.encode(_masks())
        pyramid = ae.quantize_pyramid(feature)
    assert len(pyramid) == 1
    assert torch.equal(pyramid[0], quantize(feature, ae.codebook))
