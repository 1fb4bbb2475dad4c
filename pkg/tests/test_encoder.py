import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from djscc_hbf.channel import build_dataset
from djscc_hbf.config import preset
from djscc_hbf.encoder import (Encoder, UnsupportedConfigError, realify_csi, symbols_to_features,
                               to_complex_symbols)
from djscc_hbf.numeric import ComplexGrid, DegenerateInputError, grad_check
from djscc_hbf.training import perturb_


def csi(cfg, count=3, seed=0):
    return ComplexGrid.from_numpy(build_dataset(cfg, count, seed).H_d)


def encoder(cfg, seed=0):
    torch.manual_seed(seed)
    return Encoder(cfg).double()


class TestEncode:
    @pytest.mark.parametrize("name,over", [("smoke", {}), ("desk", {"system.m": 3}), ("smoke", {"model.cpi_enabled": False})])
    def test_output_length(self, name, over):
        cfg = preset(name).with_overrides(over)
        out = encoder(cfg)(csi(cfg))
        assert out.shape == (3, cfg.system.K, 2 * cfg.system.m)

    def test_weight_sharing(self):
        cfg = preset("smoke")
        H = csi(cfg, 1)
        same = ComplexGrid(torch.cat([H.re[:, :1]] * 2, 1), torch.cat([H.im[:, :1]] * 2, 1))
        out = encoder(cfg)(same)
        assert torch.equal(out[:, 0], out[:, 1])

    def test_identity_trunks_composition(self):
        cfg = preset("smoke").with_overrides({"system.L2": 2})
        enc = encoder(cfg)
        H = csi(cfg, 2)
        x = realify_csi(H)
        p_h = enc.to_pol(enc.embed(x[..., 0, :]))
        p_v = enc.to_pol(enc.embed(x[..., 1, :]))
        p_h, p_v = enc.cpi(p_h, p_v)
        joint = torch.stack([p_h, p_v], -2).flatten(-2)
        ref = enc.head(joint.flatten(-3))
        assert torch.allclose(enc(H), ref, atol=1e-12, rtol=0)

    def test_deterministic(self):
        cfg = preset("smoke")
        enc, H = encoder(cfg), csi(cfg)
        assert torch.equal(enc(H), enc(H))

    def test_realify_layout(self):
        H = ComplexGrid.from_numpy(np.arange(12).reshape(2, 2, 3) * (1 + 2j))   # (N_c, N_r, N_t)
        x = realify_csi(H)
        assert x.shape == (2, 3, 2, 2)
        assert x[1, 2, 0, 0] == H.re[1, 0, 2] and x[1, 2, 1, 1] == H.im[1, 1, 2]

    def test_unsupported_receive_ports(self):
        cfg = preset("smoke").with_overrides({"system.N_r": 4})
        with pytest.raises(UnsupportedConfigError):
            Encoder(cfg)

    def test_grad_check(self):
        cfg = preset("smoke")
        enc = perturb_(encoder(cfg), 0.1, 3)
        H = csi(cfg, 1)
        w = torch.randn(1, 2, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

        def f():
            S = to_complex_symbols(enc(H))
            return (symbols_to_features(S.transpose(-1, -2)).reshape(1, 2, 8) * w).sum()

        reports = grad_check(f, enc.named_parameters(), max_coords=8)
        assert all(r.passed for r in reports), [r for r in reports if not r.passed]


class TestSymbols:
    def test_single_tone(self):
        s = torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0], dtype=torch.float64)
        S = to_complex_symbols(s)
        assert S.re.tolist() == [2.0, 0, 0, 0] and S.im.tolist() == [0.0] * 4

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_power_and_scale_invariance(self, m, seed, c):
        s = torch.randn(3, 2 * m, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        S = to_complex_symbols(s)
        assert torch.allclose(S.abs2().sum(-1), torch.full((3,), float(m), dtype=torch.float64), atol=1e-9, rtol=0)
        T = to_complex_symbols(s * c)
        assert torch.allclose(S.re, T.re, atol=1e-12) and torch.allclose(S.im, T.im, atol=1e-12)

    def test_zero(self):
        with pytest.raises(DegenerateInputError):
            to_complex_symbols(torch.zeros(4, dtype=torch.float64))

    def test_features_inverse_pairing(self):
        s = torch.randn(5, 2, 6, dtype=torch.float64)           # (B, K, 2m)
        S = to_complex_symbols(s).transpose(-1, -2)            # (B, m, K)
        back = symbols_to_features(S).reshape(5, 2, 6)
        scale = torch.sqrt(3 / (s * s).sum(-1, keepdim=True))
        assert torch.allclose(back, s * scale, atol=1e-14)
