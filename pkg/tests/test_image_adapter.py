import pytest
import torch

from nextscale_seg.errors import ConfigurationError, InvalidInputError
from nextscale_seg.image_adapter import ImageEncoder, SvdAdapter, svd_branch


def _features(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_rank_property():
    x = _features(10, 6)
    for r in (1, 3, 5):
        assert torch.linalg.matrix_rank(svd_branch(x, r)).item() == r


def test_full_rank_is_identity():
    x = _features(3, 10, 6)
    assert torch.allclose(svd_branch(x, 6), x, atol=1e-10)


def test_projection_is_idempotent():
    x = _features(12, 5)
    once = svd_branch(x, 2)
    assert torch.allclose(svd_branch(once, 2), once, atol=1e-10)


def test_best_approximation_error():
    x = _features(8, 8)
    s = torch.linalg.svdvals(x)
    err = torch.linalg.matrix_norm(x - svd_branch(x, 3))
    assert err.item() == pytest.approx(s[3:].pow(2).sum().sqrt().item(), rel=1e-8)


def test_invalid_rank_and_values():
    with pytest.raises(InvalidInputError):
        svd_branch(_features(4, 3), 4)
    with pytest.raises(InvalidInputError):
        svd_branch(_features(4, 3), 0)
    with pytest.raises(InvalidInputError):
        svd_branch(torch.full((4, 3), float("inf")), 1)


def test_svd_branch_is_a_stop_gradient():
    torch.manual_seed(0)
    adapter = SvdAdapter(6, 12, 5, rank=2).double()
    tokens = _features(2, 9, 6).requires_grad_()
    with_svd = adapter(tokens)
    with_svd.sum().backward()
    grad_svd = tokens.grad.clone()
    tokens.grad = None
    adapter.use_svd = False
    without = adapter(tokens)
    without.sum().backward()
    assert not torch.allclose(with_svd, without)
    assert torch.equal(grad_svd, tokens.grad)


def test_image_encoder_shapes():
    torch.manual_seed(0)
    encoder = ImageEncoder(image_size=32, latent_size=4, in_channels=4, feature_dim=8, hidden=8, adapter_hidden=16,
                           out_dim=16, rank=2)
    out = encoder(torch.rand(3, 4, 32, 32))
    assert out.shape == (3, 16, 16)
    assert encoder.num_tokens == 16
    with pytest.raises(InvalidInputError):
        encoder(torch.rand(3, 1, 32, 32))
    with pytest.raises(InvalidInputError):
        encoder(torch.full((1, 4, 32, 32), float("nan")))


def test_image_encoder_rank_config():
    with pytest.raises(ConfigurationError):
        ImageEncoder(image_size=32, latent_size=4, feature_dim=8, rank=9)


def test_frozen_backbone():
    encoder = ImageEncoder(image_size=32, latent_size=4, feature_dim=8, hidden=8, freeze_backbone=True)
    assert not any(p.requires_grad for p in encoder.backbone.parameters())
    assert all(p.requires_grad for p in encoder.adapter.parameters())


def test_adapter_gradients_match_finite_differences():
    torch.manual_seed(0)
    encoder = ImageEncoder(image_size=32, latent_size=4, feature_dim=8, hidden=8, adapter_hidden=16, out_dim=16,
                           rank=2).double()
    features = _features(2, 8, 4, 4)

    def loss():
        return encoder.adapt(features).pow(2).mean()

    params = list(encoder.adapter.parameters())
    grads = torch.autograd.grad(loss(), params)
    generator = torch.Generator().manual_seed(0)
    eps = 1e-6
    analytic, numeric = [], []
    with torch.no_grad():
        for _ in range(50):
            i = int(torch.randint(len(params), (1,), generator=generator))
            j = int(torch.randint(params[i].numel(), (1,), generator=generator))
            flat = params[i].view(-1)
            original = flat[j].item()
            flat[j] = original + eps
            plus = loss().item()
            flat[j] = original - eps
            minus = loss().item()
            flat[j] = original
            numeric.append((plus - minus) / (2 * eps))
            analytic.append(grads[i].view(-1)[j].item())
    analytic, numeric = torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64)
    assert (analytic - numeric).abs().max().item() <= 1e-4 * analytic.abs().max().item() + 1e-8
