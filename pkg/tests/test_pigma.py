import pytest
import torch

from boltzformer.encoder import resize_planes
from boltzformer.errors import ConfigError
from boltzformer.nn_core import DTYPE, grad_check, reset_parameters
from boltzformer.pigma import PiGMA, ensemble_mean, pigma_aggregate


def randn(*shape, seed=0):
    return torch.randn(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


@pytest.fixture
def pigma():
    m = PiGMA(3, 1, hidden=4)
    reset_parameters(m, 0)
    return m


def test_ensemble_mean_examples():
    same = randn(1, 1, 3, 3).expand(1, 4, 3, 3)
    torch.testing.assert_close(ensemble_mean(same), resize_planes(same[:, 0], 12, 12))
    two = torch.tensor([[[[0.0]], [[2.0]]]], dtype=DTYPE)
    assert torch.equal(ensemble_mean(two), torch.ones(1, 4, 4, dtype=DTYPE))
    x = randn(2, 5, 4, 4, seed=1)
    perm = torch.tensor([4, 2, 0, 1, 3])
    torch.testing.assert_close(ensemble_mean(x[:, perm]), ensemble_mean(x), atol=1e-14, rtol=0)
    with pytest.raises(ConfigError):
        ensemble_mean(torch.zeros(1, 0, 2, 2, dtype=DTYPE))


def test_zero_correction_weights(pigma):
    with torch.no_grad():
        for p in pigma.parameters():
            p.zero_()
    logits, img = randn(2, 3, 4, 4), randn(2, 16, 16, 1, seed=1)
    assert torch.all(pigma.pixel_correction(logits, img) == 0)
    zero = torch.zeros(2, 3, 4, 4, dtype=DTYPE)
    assert torch.all(pigma(zero, img) == 0.5)


def test_output_resolution_and_range(pigma):
    out = pigma(5 * randn(2, 3, 6, 5), randn(2, 16, 16, 1, seed=2))
    assert out.shape == (2, 24, 20)
    assert torch.all((out > 0) & (out < 1))


def test_correction_off_is_sigmoid_of_mean():
    m = PiGMA(3, 1, hidden=4, correction=False)
    reset_parameters(m, 1)
    logits = randn(1, 3, 4, 4, seed=3)
    torch.testing.assert_close(m(logits, randn(1, 16, 16, 1)), torch.sigmoid(ensemble_mean(logits)))


def test_correction_not_permutation_invariant(pigma):
    logits, img = randn(1, 3, 4, 4, seed=4), randn(1, 16, 16, 1, seed=5)
    perm = torch.tensor([2, 0, 1])
    a = pigma.pixel_correction(logits, img)
    b = pigma.pixel_correction(logits[:, perm], img)
    assert (a - b).abs().max() > 1e-6


def test_monotone_in_mean_with_correction_frozen(pigma):
    logits, img = randn(1, 3, 4, 4, seed=6), randn(1, 16, 16, 1, seed=7)
    corr = pigma.pixel_correction(logits, img).detach()
    bumped = logits.clone()
    bumped[0, 1, 2, 2] += 1.0
    base = torch.sigmoid((ensemble_mean(logits) + corr) / 2)
    up = torch.sigmoid((ensemble_mean(bumped) + corr) / 2)
    assert torch.all(up >= base)


def test_gradcheck(pigma):
    logits, img = randn(1, 3, 3, 3, seed=8), randn(1, 12, 12, 1, seed=9)
    report = grad_check(lambda: pigma_aggregate(logits, img, pigma).pow(2).sum(),
                        [("logits", logits), ("image", img)] + list(pigma.named_parameters()),
                        max_per_tensor=25)
    assert report.passed, report


def test_probability_input_option():
    m = PiGMA(2, 1, hidden=3, correction_input="probabilities")
    reset_parameters(m, 2)
    assert m(randn(1, 2, 4, 4), randn(1, 16, 16, 1)).shape == (1, 16, 16)
    with pytest.raises(ConfigError):
        PiGMA(2, correction_input="other")


def test_shape_errors(pigma):
    with pytest.raises(ConfigError):
        pigma(randn(1, 2, 4, 4), randn(1, 16, 16, 1))
    with pytest.raises(ConfigError):
        pigma(randn(1, 3, 4, 4), randn(1, 16, 16, 3))
