import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bevworld.render import (RayRenderer, RenderError, VolumeGeometry,
                             BevUpsampler, VolumeBuilder, SdfHead,
                             composite_depth, export_ply, opacity,
                             render_pointcloud, stratified_depths,
                             trilinear_sample)
from tests.conftest import make_tiny_config


def naive_composite(alpha, depths):
    """Sequential reference: w_i = a_i * prod_{j<i}(1 - a_j)."""
    weights = []
    trans = 1.0
    for a in alpha:
        weights.append(trans * a)
        trans = trans * (1.0 - a)
    depth = sum(w * d for w, d in zip(weights, depths))
    return depth, weights


class TestOpacity:
    def test_unit_sharpness_sign_flip(self):
        # s: +1 -> -1 at tau = 1 gives (sig(1) - sig(-1)) / sig(1) = 1 - e^-1
        sdf = torch.tensor([1.0, -1.0], dtype=torch.float64)
        alpha = opacity(sdf, torch.tensor(1.0, dtype=torch.float64))
        assert float(alpha[0]) == pytest.approx(0.6321205588285577, abs=1e-12)

    def test_matches_sigmoid_ratio_formula(self):
        torch.manual_seed(0)
        sdf = torch.randn(100, 9, dtype=torch.float64)
        tau = torch.tensor(3.0, dtype=torch.float64)
        sig = torch.sigmoid(tau * sdf)
        ref = ((sig[:, :-1] - sig[:, 1:]) / sig[:, :-1]).clamp(min=0.0)
        got = opacity(sdf, tau)
        assert torch.allclose(got, ref, atol=1e-12)

    def test_no_nan_for_extreme_inputs(self):
        sdf = torch.tensor([-500.0, -900.0, 400.0, -400.0])
        alpha = opacity(sdf, torch.tensor(10.0))
        assert torch.isfinite(alpha).all()
        # deep-to-deeper inside saturates at the cap, never exactly one
        assert float(alpha[0]) == pytest.approx(1.0, abs=1e-5)
        assert float(alpha[0]) < 1.0
        assert float(alpha[1]) == 0.0   # rising signed distance: transparent

    def test_saturated_alpha_keeps_finite_gradients(self):
        sdf = torch.tensor([-5.0, -80.0, -0.2, 1.0], requires_grad=True)
        alpha = opacity(sdf, torch.tensor(10.0))
        depth, weights = composite_depth(alpha, torch.tensor([1.0, 2.0, 3.0]))
        depth.backward()
        assert torch.isfinite(sdf.grad).all()

    def test_increasing_sdf_is_transparent(self):
        sdf = torch.tensor([0.1, 0.5, 2.0])
        alpha = opacity(sdf, torch.tensor(10.0))
        assert (alpha == 0.0).all()


class TestCompositeDepth:
    def test_two_sample_value(self):
        alpha = torch.tensor([0.5, 1.0], dtype=torch.float64)
        depths = torch.tensor([1.0, 2.0], dtype=torch.float64)
        depth, weights = composite_depth(alpha, depths)
        assert weights.tolist() == [0.5, 0.5]
        assert float(depth) == 1.5

    def test_matches_naive_product_exactly(self, rng):
        for n in (1, 2, 5, 17, 32):
            alpha = torch.from_numpy(rng.uniform(0, 1, size=n))
            depths = torch.from_numpy(rng.uniform(0.5, 32.0, size=n))
            depth, weights = composite_depth(alpha, depths)
            ref_depth, ref_weights = naive_composite(alpha.tolist(),
                                                     depths.tolist())
            for got, want in zip(weights.tolist(), ref_weights):
                assert got == want
            assert float((weights * depths).sum()) == pytest.approx(ref_depth,
                                                                    abs=1e-12)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1,
                    max_size=32))
    @settings(max_examples=60, deadline=None)
    def test_weights_form_a_subprobability(self, alphas):
        alpha = torch.tensor(alphas, dtype=torch.float64)
        _, weights = composite_depth(alpha, torch.ones_like(alpha))
        assert (weights >= 0).all()
        assert float(weights.sum()) <= 1.0 + 1e-12


class TestStratifiedDepths:
    def test_midpoints_without_generator(self):
        d = stratified_depths(4, 0.0, 4.0, (1,), dtype=torch.float64)
        assert d[0].tolist() == [0.5, 1.5, 2.5, 3.5]

    def test_jitter_stays_in_bins(self):
        gen = torch.Generator().manual_seed(9)
        d = stratified_depths(16, 0.5, 32.0, (3, 5), generator=gen,
                              dtype=torch.float64)
        step = (32.0 - 0.5) / 16
        lo = 0.5 + torch.arange(16, dtype=torch.float64) * step
        assert (d >= lo).all() and (d <= lo + step).all()

    def test_degenerate_range_raises(self):
        with pytest.raises(RenderError):
            stratified_depths(4, 2.0, 2.0, (1,))


class TestTrilinearSample:
    def geom(self):
        return VolumeGeometry(extent=4.0, w=4, h=4, z=2, z_min=0.0, z_max=2.0)

    def test_exact_at_voxel_centres(self):
        geom = self.geom()
        torch.manual_seed(1)
        vol = torch.randn(1, 3, geom.z, geom.h, geom.w, dtype=torch.float64)
        centres = []
        for iz in range(geom.z):
            for iy in range(geom.h):
                for ix in range(geom.w):
                    centres.append([-geom.extent + (ix + 0.5) * geom.cell_xy,
                                    -geom.extent + (iy + 0.5) * geom.cell_xy,
                                    geom.z_min + (iz + 0.5) * geom.cell_z])
        pts = torch.tensor(centres, dtype=torch.float64).unsqueeze(0)
        out = trilinear_sample(vol, pts, geom)
        want = vol.permute(0, 2, 3, 4, 1).reshape(1, -1, 3)
        assert torch.allclose(out, want, atol=1e-12)

    def test_midpoint_is_average_of_neighbours(self):
        geom = self.geom()
        vol = torch.zeros(1, 1, geom.z, geom.h, geom.w, dtype=torch.float64)
        vol[0, 0, 0, 0, 0] = 2.0
        vol[0, 0, 0, 0, 1] = 4.0
        x_mid = -geom.extent + 1.0 * geom.cell_xy    # between centres 0 and 1
        pts = torch.tensor([[[x_mid, -geom.extent + 0.5 * geom.cell_xy,
                              geom.z_min + 0.5 * geom.cell_z]]],
                           dtype=torch.float64)
        out = trilinear_sample(vol, pts, geom)
        assert float(out[0, 0, 0]) == pytest.approx(3.0, abs=1e-12)

    def test_outside_volume_is_zero(self):
        geom = self.geom()
        vol = torch.ones(1, 2, geom.z, geom.h, geom.w, dtype=torch.float64)
        pts = torch.tensor([[[100.0, 0.0, 0.0]]], dtype=torch.float64)
        assert (trilinear_sample(vol, pts, geom) == 0).all()

    def test_gradients_flow_to_volume(self):
        geom = self.geom()
        vol = torch.rand(1, 2, geom.z, geom.h, geom.w, dtype=torch.float64,
                         requires_grad=True)
        pts = torch.tensor([[[0.3, -0.2, 1.1]]], dtype=torch.float64)
        trilinear_sample(vol, pts, geom).sum().backward()
        assert vol.grad is not None and float(vol.grad.abs().sum()) > 0


class TestRayRenderer:
    def make(self, dtype=torch.float64):
        cfg = make_tiny_config()
        renderer = RayRenderer(cfg, feat_channels=cfg.vol_cprime).to(dtype)
        torch.manual_seed(5)
        vol = torch.randn(2, cfg.vol_cprime, cfg.vol_z, cfg.bev_w, cfg.bev_w,
                          dtype=dtype)
        dirs = torch.nn.functional.normalize(
            torch.randn(2, 6, 3, dtype=dtype), dim=-1)
        origins = torch.zeros(2, 6, 3, dtype=dtype)
        origins[..., 2] = 1.8
        return renderer, vol, origins, dirs

    def test_output_shapes_and_ranges(self):
        renderer, vol, origins, dirs = self.make()
        depth, wsum, sdf = renderer(vol, origins, dirs)
        assert depth.shape == (2, 6) and wsum.shape == (2, 6)
        assert sdf.shape == (2, 6, renderer.n_samples)
        assert (depth >= 0).all()
        assert float(depth.detach().max()) <= renderer.depth_max
        assert (wsum >= 0).all() and (wsum <= 1.0 + 1e-12).all()

    def test_origin_outside_footprint_raises(self):
        renderer, vol, origins, dirs = self.make()
        origins = origins.clone()
        origins[0, 0, 0] = 100.0
        with pytest.raises(RenderError):
            renderer(vol, origins, dirs)

    def test_expected_depth_gradient_matches_finite_differences(self):
        # check d(depth)/d(sdf sample) through opacity + compositing
        torch.manual_seed(2)
        n = 16
        sdf = torch.randn(n, dtype=torch.float64, requires_grad=True)
        depths = torch.linspace(0.5, 30.0, n, dtype=torch.float64)
        tau = torch.tensor(4.0, dtype=torch.float64)

        def f(s):
            alpha = opacity(s, tau)
            d, _ = composite_depth(alpha, depths[:-1])
            return d

        out = f(sdf)
        out.backward()
        grad = sdf.grad.clone()
        eps = 1e-6
        for i in range(n):
            shift = torch.zeros_like(sdf.detach())
            shift[i] = eps
            num = (f(sdf.detach() + shift) - f(sdf.detach() - shift)) / (2 * eps)
            diff = abs(float(num) - float(grad[i]))
            rel = diff / max(abs(float(num)), abs(float(grad[i])), 1e-12)
            # near-zero gradients only have to agree in absolute terms
            assert rel < 1e-4 or diff < 1e-7

    def test_deterministic_without_generator(self):
        renderer, vol, origins, dirs = self.make()
        d1, _, _ = renderer(vol, origins, dirs)
        d2, _, _ = renderer(vol, origins, dirs)
        assert torch.equal(d1, d2)


class TestVolumePath:
    def test_upsampler_scales_by_four(self):
        up = BevUpsampler(8, 16)
        out = up(torch.randn(2, 8, 10, 10))
        assert out.shape == (2, 16, 40, 40)

    def test_volume_builder_splits_z_major(self):
        vb = VolumeBuilder(z=4, levels_per_cell=4, width=8, out_channels=4)
        out = vb(torch.randn(2, 16, 12, 12))
        assert out.shape == (2, 4, 4, 12, 12)

    def test_volume_builder_checks_channels(self):
        vb = VolumeBuilder(z=4, levels_per_cell=4, width=8, out_channels=4)
        with pytest.raises(RenderError):
            vb(torch.randn(2, 15, 12, 12))

    def test_sdf_head_tau_is_positive_and_initialised(self):
        head = SdfHead(feat_channels=4, extent=32.0, tau_init=10.0)
        assert float(head.tau.detach()) == pytest.approx(10.0, rel=1e-6)
        with torch.no_grad():
            head.log_tau.fill_(-20.0)
        assert float(head.tau.detach()) > 0


class TestPointcloudExport:
    def test_threshold_filters_rays(self):
        depth = torch.tensor([[1.0, 2.0]])
        wsum = torch.tensor([[0.9, 0.1]])
        dirs = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        pts = render_pointcloud(depth, wsum, np.zeros(3), dirs, threshold=0.5)
        assert pts.shape == (1, 3)
        assert pts[0].tolist() == [1.0, 0.0, 0.0]

    def test_export_ply_roundtrip(self, tmp_path):
        pts = np.array([[1.0, 2.0, 3.0], [-1.5, 0.0, 2.25]])
        path = tmp_path / "cloud.ply"
        export_ply(pts, path)
        text = path.read_text().splitlines()
        assert text[0] == "ply"
        assert "element vertex 2" in text[2]
        assert text[-1].startswith("-1.5")
