import itertools

import numpy as np
import pytest
import torch

from stmg.backbone import BackboneConfig, BlockMask, ResidualBackbone, count_flops, prunable_block_cost

from helpers import ExcisedNet, hook_flops_oracle, relative_error

TOY = BackboneConfig()  # 2 layers x (3, 4) blocks, K = 5


@pytest.fixture()
def backbone():
    torch.manual_seed(0)
    return ResidualBackbone(TOY).eval()


@pytest.fixture()
def frame():
    g = torch.Generator().manual_seed(1)
    return torch.rand((3, 64, 64), generator=g)


class TestConfig:
    def test_prunable_count(self):
        assert TOY.num_prunable == 5
        assert BackboneConfig(layers=((2, 8), (2, 8), (3, 8)), feature_stride=8).num_prunable == 4

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            BackboneConfig(layers=())
        with pytest.raises(ValueError):
            BackboneConfig(feature_stride=6)
        with pytest.raises(ValueError):
            BackboneConfig(layers=((1, 8),))  # no prunable blocks
        with pytest.raises(ValueError):
            BackboneConfig(layers=((2, 8),), feature_stride=16)  # stride budget too deep

    def test_block_mask_validation(self):
        with pytest.raises(ValueError):
            BlockMask(keep=(0.0, 1.5))
        assert BlockMask.ones(5).num_kept == 5
        assert BlockMask.zeros(5).num_kept == 0


class TestForward:
    def test_full_equals_all_ones_mask_bitwise(self, backbone, frame):
        with torch.no_grad():
            a = backbone.forward_full(frame)
            b = backbone.forward_masked(frame, BlockMask.ones(5))
        assert torch.equal(a, b)

    def test_output_shape_independent_of_mask(self, backbone, frame):
        with torch.no_grad():
            shapes = {
                tuple(backbone.forward_masked(frame, BlockMask(keep=m)).shape)
                for m in [(1.0,) * 5, (0.0,) * 5, (1.0, 0.0, 1.0, 0.0, 1.0)]
            }
        assert shapes == {(32, 8, 8)}

    def test_single_drop_equals_excised(self, backbone, frame):
        for k in range(5):
            keep = [1.0] * 5
            keep[k] = 0.0
            with torch.no_grad():
                masked = backbone.forward_masked(frame, BlockMask(keep=tuple(keep)))
                excised = ExcisedNet(backbone, keep).eval()(frame)
            assert relative_error(masked, excised) <= 1e-6

    def test_all_masks_equal_excised(self, backbone, frame):
        for bits in itertools.product((0.0, 1.0), repeat=5):
            with torch.no_grad():
                masked = backbone.forward_masked(frame, BlockMask(keep=bits))
                excised = ExcisedNet(backbone, list(bits)).eval()(frame)
            assert relative_error(masked, excised) <= 1e-6, f"mask {bits}"

    def test_mask_length_mismatch(self, backbone, frame):
        with pytest.raises(ValueError):
            backbone.forward_masked(frame, [1.0] * 4)

    def test_input_channel_mismatch(self, backbone):
        with pytest.raises(ValueError):
            backbone.forward_full(torch.zeros(1, 64, 64))

    def test_determinism(self, backbone, frame):
        with torch.no_grad():
            a = backbone.forward_full(frame)
            b = backbone.forward_full(frame)
        assert torch.equal(a, b)

    def test_finite_on_zero_input(self, backbone):
        with torch.no_grad():
            out = backbone.forward_full(torch.zeros(3, 64, 64))
        assert torch.isfinite(out).all()


class TestHead:
    def test_constant_feature_constant_scores(self, backbone):
        feature = torch.full((32, 8, 8), 0.37)
        with torch.no_grad():
            scores = backbone.segmentation_head(feature, (64, 64))
        assert scores.shape == (4, 64, 64)
        for c in range(4):
            assert torch.allclose(scores[c], scores[c, 0, 0].expand(64, 64), atol=1e-6)

    def test_shape_contract(self, backbone, frame):
        with torch.no_grad():
            scores = backbone.segmentation_head(backbone.forward_full(frame), (64, 64))
        assert scores.shape == (4, 64, 64)
        assert backbone.segmentation_head(torch.zeros(32, 8, 8)).shape == (4, 64, 64)


class TestGradients:
    def test_all_parameters_receive_gradients_full(self, frame):
        torch.manual_seed(2)
        net = ResidualBackbone(TOY).train()
        scores = net(frame.unsqueeze(0))
        scores.sum().backward()
        missing = [n for n, p in net.named_parameters() if p.grad is None]
        assert missing == []

    def test_hard_zero_mask_gives_exactly_zero_grads(self, frame):
        torch.manual_seed(2)
        net = ResidualBackbone(TOY).train()
        mask = torch.tensor([1.0, 0.0, 1.0, 0.0, 1.0])
        feat = net.features(frame.unsqueeze(0), mask)
        net.segmentation_head(feat, (64, 64)).sum().backward()
        dropped_blocks = [net.layers[0][2], net.layers[1][2]]
        for block in dropped_blocks:
            for p in block.parameters():
                assert p.grad is None or torch.all(p.grad == 0)

    def test_relaxed_mask_flows_to_mask(self, frame):
        torch.manual_seed(2)
        net = ResidualBackbone(TOY).eval()
        mask = torch.full((5,), 0.5, requires_grad=True)
        feat = net.features(frame.unsqueeze(0), mask)
        feat.sum().backward()
        assert mask.grad is not None and torch.isfinite(mask.grad).all()


class TestFlops:
    def test_matches_independent_hook_oracle_full(self, backbone, frame):
        assert count_flops(TOY, None, (64, 64)) == hook_flops_oracle(backbone, frame, None)

    def test_matches_hook_oracle_on_masks(self, backbone, frame):
        for keep in [(0.0,) * 5, (1.0, 0.0, 1.0, 0.0, 1.0), (0.0, 1.0, 0.0, 1.0, 0.0)]:
            mask = BlockMask(keep=keep)
            assert count_flops(TOY, mask, (64, 64)) == hook_flops_oracle(backbone, frame, mask)

    def test_single_drop_difference_is_block_cost(self):
        full = count_flops(TOY, None, (64, 64))
        for k in range(5):
            keep = [1.0] * 5
            keep[k] = 0.0
            assert full - count_flops(TOY, keep, (64, 64)) == prunable_block_cost(TOY, k, (64, 64))

    def test_zeros_equals_skeleton_and_additivity(self):
        full = count_flops(TOY, None, (64, 64))
        zeros = count_flops(TOY, [0.0] * 5, (64, 64))
        dropped_total = sum(prunable_block_cost(TOY, k, (64, 64)) for k in range(5))
        assert full - zeros == dropped_total

    def test_monotone_in_mask(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.integers(0, 2, 5).astype(float)
            b = np.maximum(a, rng.integers(0, 2, 5).astype(float))
            assert count_flops(TOY, a, (64, 64)) <= count_flops(TOY, b, (64, 64))

    def test_odd_input_sizes_match_oracle(self, frame):
        cfg = BackboneConfig(layers=((2, 8), (2, 12)), feature_stride=8)
        torch.manual_seed(3)
        net = ResidualBackbone(cfg).eval()
        x = torch.rand(3, 50, 46)
        assert count_flops(cfg, None, (50, 46)) == hook_flops_oracle(net, x, None)
