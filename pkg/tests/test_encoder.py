import copy

import numpy as np
import pytest
import torch

from conftest import central_difference, relative_error
from robustecg.encoder import (
    DinoHead,
    EcgEncoder,
    EncoderConfig,
    HashedTextEncoder,
    ProjectionHead,
    count_parameters,
    dino_forward,
    encode_ecg,
    encode_text,
    project,
)
from robustecg.errors import ConfigError, DimensionMismatch, ShapeError
from robustecg.signalio import EcgRecord, bandpass

TOY = EncoderConfig(stage_depths=[2, 2], stage_widths=[32, 64])


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return EcgEncoder(TOY).eval()


def smooth_batch(seed, b=2, n=5000):
    x = np.random.default_rng(seed).standard_normal((b, 12, n))
    return torch.from_numpy(bandpass(x, 500, 0.5, 40.0)).float()


class TestEcgEncoder:
    def test_toy_shape(self, toy):
        rec = EcgRecord(np.random.default_rng(0).standard_normal((12, 5000)), 500)
        with torch.no_grad():
            z = encode_ecg(toy, rec)
        assert z.shape == (64,)
        assert torch.isfinite(z).all()

    def test_identical_rows(self, toy):
        x = smooth_batch(1, 1).repeat(2, 1, 1)
        with torch.no_grad():
            z = toy(x)
        assert torch.equal(z[0], z[1])

    def test_zero_record_finite(self, toy):
        with torch.no_grad():
            assert torch.isfinite(toy(torch.zeros(1, 12, 5000))).all()

    def test_zero_record_gradients_finite(self, toy):
        x = torch.zeros(1, 12, 1000, requires_grad=True)
        toy(x).sum().backward()
        assert torch.isfinite(x.grad).all()

    def test_nan_free_on_range(self, toy):
        x = torch.from_numpy(np.random.default_rng(2).uniform(-10, 10, (3, 12, 2000))).float()
        with torch.no_grad():
            assert torch.isfinite(toy(x)).all()

    def test_too_short(self, toy):
        with pytest.raises(ShapeError):
            toy(torch.zeros(1, 12, TOY.min_samples() - 1))
        with torch.no_grad():
            toy(torch.zeros(1, 12, TOY.min_samples()))

    def test_wrong_lead_count(self, toy):
        with pytest.raises(ShapeError):
            toy(torch.zeros(1, 3, 1000))

    def test_shift_by_full_stride_chain(self, toy):
        for seed in range(5):
            x = smooth_batch(10 + seed)
            with torch.no_grad():
                a = toy(x)
                b = toy(torch.roll(x, TOY.total_stride, dims=-1))
            assert float((a - b).norm() / a.norm()) < 1e-3

    def test_parameter_count(self):
        assert count_parameters(EcgEncoder(TOY)) == 92_320
        assert count_parameters(EcgEncoder(EncoderConfig())) == 850_584

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EncoderConfig(stage_depths=[2], stage_widths=[8, 16])
        assert EncoderConfig().embed_dim == 192


class TestText:
    def test_empty_and_deterministic(self):
        enc = HashedTextEncoder(256, 16)
        with torch.no_grad():
            a = encode_text(enc, "")
            b = encode_text(enc, "sinus rhythm")
            c = encode_text(enc, "sinus rhythm")
        assert a.shape == (16,) and torch.isfinite(a).all()
        assert torch.equal(b, c)

    def test_batch(self):
        enc = HashedTextEncoder(256, 16)
        with torch.no_grad():
            out = encode_text(enc, ["a", "b c", ""])
        assert out.shape == (3, 16)


class TestProjection:
    def test_unit_norm(self):
        head = ProjectionHead(8, 4)
        z = project(head, torch.randn(5, 8))
        assert torch.allclose(z.norm(dim=-1), torch.ones(5), atol=1e-6)

    def test_zero_input(self):
        z = project(ProjectionHead(8, 4), torch.zeros(8))
        assert torch.equal(z, torch.tensor([1.0, 0, 0, 0]))

    def test_scale_invariance(self):
        head = ProjectionHead(8, 4)
        x = torch.randn(3, 8)
        assert torch.allclose(project(head, x), project(head, 10 * x), atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ProjectionHead(8, 4)(torch.zeros(7))


class TestDinoHead:
    def test_shape(self):
        out = dino_forward(DinoHead(16, 8, 32, 8), torch.randn(3, 16))
        assert out.shape == (3, 8) and torch.isfinite(out).all()

    def test_identical_copies(self):
        a = DinoHead(16, 8, 32, 8)
        b = copy.deepcopy(a)
        x = torch.randn(2, 16)
        assert torch.equal(a(x), b(x))

    @pytest.mark.parametrize("seed", range(3))
    def test_input_gradient(self, seed):
        torch.manual_seed(seed)
        head = DinoHead(6, 8, 16, 4).double()
        x = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
        head(x).sum().backward()
        fd = central_difference(lambda v: head(v).sum(), x)
        assert relative_error(x.grad, fd) < 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            DinoHead(16, 8)(torch.zeros(2, 15))
