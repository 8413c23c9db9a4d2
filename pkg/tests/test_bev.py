import numpy as np
import pytest
import torch

from bevworld.bev import (BevDownsample, BevLift, BevShapeError,
                          CalibrationError, TokenProjector, validate_rig)
from tests.conftest import make_tiny_config


def lift_and_features(cfg, batch=2, seed=0):
    torch.manual_seed(seed)
    lift = BevLift(cfg, in_channels=5)
    feats = torch.rand(batch, cfg.cam_count, 5, cfg.cam_height, cfg.cam_width)
    return lift, feats


class TestValidateRig:
    def test_accepts_default(self):
        validate_rig(make_tiny_config())

    def test_rejects_bad_rigs(self):
        for override in ("cam.count=0", "cam.hfov_deg=180.0",
                         "cam.vfov_deg=0.0", "cam.width=1"):
            with pytest.raises(CalibrationError):
                validate_rig(make_tiny_config(override))


class TestBevLift:
    def test_output_shape(self):
        cfg = make_tiny_config()
        lift, feats = lift_and_features(cfg)
        out = lift(feats)
        assert out.shape == (2, cfg.bev_c, cfg.bev_w, cfg.bev_w)

    def test_input_shape_check(self):
        cfg = make_tiny_config()
        lift, feats = lift_and_features(cfg)
        with pytest.raises(BevShapeError):
            lift(feats[:, :1])

    def test_unseen_cells_keep_their_query(self):
        # a 2-camera rig with narrow FOV leaves blind sectors
        cfg = make_tiny_config()
        lift, feats = lift_and_features(cfg)
        seen = lift.key_valid.reshape(cfg.cam_count, cfg.bev_w * cfg.bev_w,
                                      lift.n_anchors)
        seen = seen.permute(1, 2, 0).reshape(cfg.bev_w * cfg.bev_w, -1).any(dim=1)
        assert not bool(seen.all()), "rig must leave unseen cells for this test"
        out = lift(feats)
        cells = out.permute(0, 2, 3, 1).reshape(2, -1, cfg.bev_c)
        want = lift.grid_queries.detach()
        for b in range(2):
            unseen = ~seen
            assert torch.equal(cells[b][unseen], want[unseen])

    def test_key_order_invariance(self):
        """Attention over projected pixels must not depend on camera order."""
        cfg = make_tiny_config()
        lift, feats = lift_and_features(cfg)
        base = lift(feats)
        perm = torch.tensor([1, 0])
        with torch.no_grad():
            lift.corner_idx.copy_(lift.corner_idx[perm])
            lift.corner_weight.copy_(lift.corner_weight[perm])
            lift.key_valid.copy_(lift.key_valid[perm])
        swapped = lift(feats[:, perm])
        assert torch.allclose(base, swapped, atol=1e-6)

    def test_single_visible_key_returns_value_projection(self):
        """With constant features, seen cells equal wv(const feature)."""
        cfg = make_tiny_config()
        lift, _ = lift_and_features(cfg)
        const = torch.full((1, cfg.cam_count, 5, cfg.cam_height, cfg.cam_width),
                           0.37)
        out = lift(const)
        cells = out.permute(0, 2, 3, 1).reshape(-1, cfg.bev_c)
        seen = lift.key_valid.reshape(cfg.cam_count, -1, lift.n_anchors)
        seen = seen.permute(1, 2, 0).reshape(cfg.bev_w * cfg.bev_w, -1).any(dim=1)
        want = lift.wv(torch.full((5,), 0.37))
        # attention weights sum to one, and every key is the same vector
        assert torch.allclose(cells[seen], want.expand(int(seen.sum()), -1),
                              atol=1e-6)

    def test_gradients_reach_queries_and_projections(self):
        cfg = make_tiny_config()
        lift, feats = lift_and_features(cfg)
        lift(feats).sum().backward()
        assert lift.grid_queries.grad is not None
        assert lift.wv.weight.grad is not None


class TestBevDownsample:
    def test_channel_doubling_twice(self):
        down = BevDownsample(8)
        out = down(torch.rand(2, 8, 16, 16))
        assert out.shape == (2, 32, 4, 4)

    def test_divisibility_check(self):
        down = BevDownsample(8)
        with pytest.raises(BevShapeError):
            down(torch.rand(1, 8, 10, 10))


class TestTokenProjector:
    def test_row_major_flatten_via_identity(self):
        proj = TokenProjector(in_channels=32, dim=32)
        with torch.no_grad():
            proj.proj.weight.copy_(torch.eye(32))
            proj.proj.bias.zero_()
        comp = torch.rand(1, 32, 3, 5)
        tokens = proj(comp)
        assert tokens.shape == (1, 15, 32)
        # token r*W + c must equal the channel vector of cell (r, c)
        for r in range(3):
            for c in range(5):
                assert torch.equal(tokens[0, r * 5 + c], comp[0, :, r, c])

    def test_projection_is_linear(self):
        proj = TokenProjector(in_channels=6, dim=4)
        a = torch.rand(1, 6, 2, 2)
        b = torch.rand(1, 6, 2, 2)
        with torch.no_grad():
            proj.proj.bias.zero_()
        lhs = proj(a + b)
        rhs = proj(a) + proj(b)
        assert torch.allclose(lhs, rhs, atol=1e-6)
