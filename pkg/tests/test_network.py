import numpy as np
import pytest

from vidsr import tensor as T
from vidsr.network import (
    BackboneConfig,
    Branch,
    MultiBranchConv,
    build_backbone,
    mbconv_forward,
    named_params,
    param_count,
    sr_forward,
)
from vidsr.tensor import ChannelMismatch, ConvKernel, Tensor4


def rnd(shape, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return ((rng.random(shape) - 0.5) * 2 * scale).astype(np.float32)


def kern3(c_out, c_in, seed, bias=True):
    return ConvKernel(rnd((c_out, c_in, 3, 3), seed),
                      rnd((c_out,), seed + 1000) if bias else np.zeros(c_out, np.float32))


def kern1(c, seed, bias=True):
    return ConvKernel(rnd((c, c, 1, 1), seed),
                      rnd((c,), seed + 1000) if bias else np.zeros(c, np.float32))


def identity1(c):
    return ConvKernel(np.eye(c, dtype=np.float32).reshape(c, c, 1, 1),
                      np.zeros(c, np.float32))


def random_mbconv(c, m, seed, merge="sum"):
    branches = []
    for i in range(m):
        cascade = [kern1(c, seed + 10 * i + j) for j in range(i)]
        branches.append(Branch(cascade, kern3(c, c, seed + 100 + i)))
    return MultiBranchConv(c, merge, branches)


class TestMultiBranchForward:
    def test_single_bare_branch_equals_plain_conv(self):
        c = 4
        k = kern3(c, c, 1)
        mb = MultiBranchConv(c, "sum", [Branch((), k)])
        x = Tensor4.from_array(rnd((1, c, 6, 6), 2))
        got = mbconv_forward(mb, x)
        want = T.conv2d(x, k, padding=1)
        np.testing.assert_array_equal(got.data, want.data)

    def test_identity_cascade_gives_sum_of_plain_convs(self):
        c = 3
        f0 = kern3(c, c, 3)
        f1 = kern3(c, c, 4)
        mb = MultiBranchConv(c, "sum", [Branch((), f0), Branch((identity1(c),), f1)])
        x = Tensor4.from_array(rnd((2, c, 5, 7), 5))
        got = mbconv_forward(mb, x)
        want = T.conv2d(x, f0, 1).data + T.conv2d(x, f1, 1).data
        np.testing.assert_allclose(got.data, want, atol=1e-5)

    def test_output_dims_equal_input_dims(self):
        for c, m, h, w in ((1, 1, 3, 3), (4, 3, 8, 5), (2, 4, 6, 6)):
            mb = random_mbconv(c, m, seed=c * 10 + m)
            x = Tensor4.from_array(rnd((1, c, h, w), 6))
            assert mbconv_forward(mb, x).dims == x.dims

    def test_concat_mode_widens_channels(self):
        mb = random_mbconv(3, 2, seed=30, merge="concat")
        x = Tensor4.from_array(rnd((1, 3, 4, 4), 7))
        y = mbconv_forward(mb, x)
        assert y.dims == (1, 6, 4, 4)

    def test_branch_linearity_zero_bias(self):
        c = 4
        branches = []
        for i in range(3):
            cascade = [kern1(c, 40 + 10 * i + j, bias=False) for j in range(i)]
            branches.append(Branch(cascade, kern3(c, c, 50 + i, bias=False)))
        mb = MultiBranchConv(c, "sum", branches)
        x = rnd((1, c, 6, 6), 8)
        y = rnd((1, c, 6, 6), 9)
        a, b = 0.6, -1.1
        lhs = mbconv_forward(mb, Tensor4.from_array(a * x + b * y)).data
        rhs = (a * mbconv_forward(mb, Tensor4.from_array(x)).data
               + b * mbconv_forward(mb, Tensor4.from_array(y)).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_zero_branch_is_no_op(self):
        c = 3
        mb = random_mbconv(c, 2, seed=60)
        zero_main = ConvKernel(np.zeros((c, c, 3, 3), np.float32),
                               np.zeros(c, np.float32))
        extra = Branch([kern1(c, 61), kern1(c, 62)], zero_main)
        grown = MultiBranchConv(c, "sum", list(mb.branches) + [extra])
        x = Tensor4.from_array(rnd((1, c, 5, 5), 63))
        np.testing.assert_allclose(mbconv_forward(grown, x).data,
                                   mbconv_forward(mb, x).data, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        mb = random_mbconv(4, 2, seed=70)
        with pytest.raises(ChannelMismatch):
            mbconv_forward(mb, Tensor4.zeros(1, 3, 4, 4))

    def test_branch_structure_enforced(self):
        c = 2
        with pytest.raises(T.ShapeMismatch):
            # branch 0 may not carry a cascade kernel
            MultiBranchConv(c, "sum", [Branch((identity1(c),), kern3(c, c, 71))])


def expected_param_count(config: BackboneConfig) -> int:
    """Closed-form parameter count by enumerating every kernel."""
    c, s = config.channels, config.scale
    conv3 = lambda ci, co: co * ci * 9 + co
    conv1 = c * c + c
    total = conv3(3, c) + conv3(c, 3 * s * s)
    per_block_conv = sum(i * conv1 + conv3(c, c) for i in range(config.branches))
    total += config.blocks * 2 * per_block_conv
    return total


class TestBackbone:
    def test_param_count_matches_enumeration(self):
        cfg = BackboneConfig(channels=16, blocks=2, branches=3, scale=2)
        net = build_backbone(cfg, seed=0)
        assert param_count(net) == expected_param_count(cfg)

    def test_m1_count_equals_plain_baseline(self):
        cfg = BackboneConfig(channels=8, blocks=2, branches=1, scale=2)
        net = build_backbone(cfg, seed=0)
        plain = (8 * 3 * 9 + 8) + 2 * 2 * (8 * 8 * 9 + 8) + (8 * 12 * 9 + 12)
        assert param_count(net) == plain

    def test_same_seed_bit_identical(self):
        cfg = BackboneConfig(channels=8, blocks=1, branches=2, scale=3)
        a = build_backbone(cfg, seed=123)
        b = build_backbone(cfg, seed=123)
        for (na, pa), (nb, pb) in zip(named_params(a), named_params(b)):
            assert na == nb
            np.testing.assert_array_equal(pa, pb)

    def test_invalid_scale_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(scale=5)

    def test_zero_net_with_skip_is_bicubic(self):
        cfg = BackboneConfig(channels=4, blocks=1, branches=2, scale=2)
        net = build_backbone(cfg, seed=0)
        zeros = {name: np.zeros_like(p) for name, p in named_params(net)}
        from vidsr.network import rebuild_with_params
        net0 = rebuild_with_params(net, zeros)
        x = Tensor4.from_array(np.random.default_rng(3).random((1, 3, 6, 6)))
        got = sr_forward(net0, x)
        want = T.bicubic_resize(x, 2)
        np.testing.assert_allclose(got.data, want.data, atol=1e-6)

    def test_output_dims(self):
        cfg = BackboneConfig(channels=8, blocks=1, branches=2, scale=2)
        net = build_backbone(cfg, seed=1)
        x = Tensor4.from_array(np.random.default_rng(4).random((1, 3, 24, 24)))
        assert sr_forward(net, x).dims == (1, 3, 48, 48)

    def test_names_are_unique_and_ordered(self):
        cfg = BackboneConfig(channels=4, blocks=2, branches=3, scale=2)
        net = build_backbone(cfg, seed=5)
        names = [n for n, _ in named_params(net)]
        assert len(names) == len(set(names))
        assert names[0] == "head.w" and names[-1] == "tail.b"
