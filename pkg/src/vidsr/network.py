"""Training-time SR network built from multi-branch convolution blocks.

A multi-branch block holds M parallel branches; branch i applies i
consecutive 1x1 convolutions followed by one 3x3 convolution, and the
branch outputs are merged by summation (or channel concatenation).
Branches contain no nonlinearity, which is what makes the block
collapsible into a single convolution (see ``fuse``).

Border convention: the block input is zero-padded by one pixel before
the 1x1 cascade, and the 3x3 convolution then runs without padding.
The cascade maps the zero ring to its accumulated bias, which is exactly
the ring value the fused bias term assumes, so fusion is exact at the
borders too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ChannelMismatch, ConvKernel, ShapeMismatch, Tensor4, _bicubic_resize, _conv2d, _pixel_shuffle, _relu

MERGE_MODES = ("sum", "concat")


@dataclass(frozen=True)
class Branch:
    """One branch: a (possibly empty) 1x1 cascade, then a 3x3 conv."""

    cascade: tuple
    main: ConvKernel

    def __post_init__(self):
        object.__setattr__(self, "cascade", tuple(self.cascade))
        for k in self.cascade:
            if k.size != 1:
                raise ShapeMismatch("cascade kernels must be 1x1")
        if self.main.size != 3:
            raise ShapeMismatch("branch main kernel must be 3x3")
        chain = list(self.cascade) + [self.main]
        for a, b in zip(chain, chain[1:]):
            if a.out_channels != b.in_channels:
                raise ChannelMismatch(
                    f"branch chain breaks: {a.out_channels} -> {b.in_channels}")


@dataclass(frozen=True)
class MultiBranchConv:
    """M parallel branches over shared input; branch i carries i 1x1 convs."""

    channels: int
    merge: str
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.merge not in MERGE_MODES:
            raise ValueError(f"merge must be one of {MERGE_MODES}")
        if not self.branches:
            raise ValueError("need at least one branch")
        for i, br in enumerate(self.branches):
            if len(br.cascade) != i:
                raise ShapeMismatch(
                    f"branch {i} must carry exactly {i} cascade kernels, "
                    f"has {len(br.cascade)}")
            if br.main.in_channels != self.channels:
                raise ChannelMismatch("branch input width != block channels")
            if br.main.out_channels != self.channels:
                raise ChannelMismatch("branch output width != block channels")

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def out_channels(self) -> int:
        if self.merge == "sum":
            return self.channels
        return self.channels * self.num_branches


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 16
    blocks: int = 2
    branches: int = 3
    scale: int = 2
    global_skip: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1 or self.branches < 1:
            raise ValueError("channels, blocks, branches must be >= 1")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")


@dataclass
class SRNet:
    """head conv -> residual blocks of two multi-branch convs -> tail conv
    + pixel shuffle, with an optional global bicubic skip."""

    config: BackboneConfig
    head: ConvKernel
    body: list  # [(MultiBranchConv, MultiBranchConv), ...]
    tail: ConvKernel

    @property
    def scale(self) -> int:
        return self.config.scale

    @property
    def global_skip(self) -> bool:
        return self.config.global_skip


@dataclass
class FusedNet:
    """Single-branch inference network; body entries are plain conv pairs."""

    channels: int
    scale: int
    global_skip: bool
    head: ConvKernel
    body: list  # [(ConvKernel, ConvKernel), ...]
    tail: ConvKernel


# ---------------------------------------------------------------------------
# parameter naming (stable order shared by the optimizer and the container)
# ---------------------------------------------------------------------------

def _branch_names(prefix, branch):
    for j in range(len(branch.cascade)):
        yield f"{prefix}.casc{j}.w", branch.cascade[j].weight
        yield f"{prefix}.casc{j}.b", branch.cascade[j].bias
    yield f"{prefix}.main.w", branch.main.weight
    yield f"{prefix}.main.b", branch.main.bias


def named_params(net) -> list:
    """Deterministic (name, array) list covering every parameter tensor."""
    out = [("head.w", net.head.weight), ("head.b", net.head.bias)]
    for bi, (c0, c1) in enumerate(net.body):
        for ci, conv in ((0, c0), (1, c1)):
            prefix = f"body{bi}.conv{ci}"
            if isinstance(conv, MultiBranchConv):
                for i, br in enumerate(conv.branches):
                    out.extend(_branch_names(f"{prefix}.br{i}", br))
            else:
                out.append((f"{prefix}.w", conv.weight))
                out.append((f"{prefix}.b", conv.bias))
    out.append(("tail.w", net.tail.weight))
    out.append(("tail.b", net.tail.bias))
    return out


def param_count(net) -> int:
    return sum(int(a.size) for _, a in named_params(net))


def rebuild_with_params(net, values: dict):
    """Copy of the network with parameter arrays replaced by ``values``."""

    def k(wname):
        return ConvKernel(values[wname], values[wname[:-2] + ".b"])

    head = k("head.w")
    tail = k("tail.w")
    body = []
    for bi, (c0, c1) in enumerate(net.body):
        pair = []
        for ci, conv in ((0, c0), (1, c1)):
            prefix = f"body{bi}.conv{ci}"
            if isinstance(conv, MultiBranchConv):
                branches = []
                for i, br in enumerate(conv.branches):
                    casc = [k(f"{prefix}.br{i}.casc{j}.w")
                            for j in range(len(br.cascade))]
                    branches.append(Branch(casc, k(f"{prefix}.br{i}.main.w")))
                pair.append(MultiBranchConv(conv.channels, conv.merge, branches))
            else:
                pair.append(k(f"{prefix}.w"))
        body.append(tuple(pair))
    if isinstance(net, SRNet):
        return SRNet(net.config, head, body, tail)
    return FusedNet(net.channels, net.scale, net.global_skip, head, body, tail)


# ---------------------------------------------------------------------------
# forward (one code path for eager arrays and for tape nodes)
# ---------------------------------------------------------------------------

class EagerOps:
    """Array-level mirror of the Tape op surface (no gradients)."""

    @staticmethod
    def conv2d(x, w, b, padding, pad_values=None):
        return _conv2d(x, w, b, padding, pad_values)

    @staticmethod
    def pad_const(x, p, values=None):
        if p == 0:
            return x
        bb, c, h, w = x.shape
        if values is None:
            out = np.zeros((bb, c, h + 2 * p, w + 2 * p), x.dtype)
        else:
            out = np.empty((bb, c, h + 2 * p, w + 2 * p), x.dtype)
            out[...] = np.asarray(values, x.dtype)[None, :, None, None]
        out[:, :, p:-p, p:-p] = x
        return out

    @staticmethod
    def relu(x):
        return _relu(x)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sum_nodes(items):
        items = list(items)
        total = items[0]
        for it in items[1:]:
            total = total + it
        return total

    @staticmethod
    def concat_channels(items):
        return np.concatenate(list(items), axis=1)

    stack_kernels = concat_channels

    @staticmethod
    def pixel_shuffle(x, r):
        return _pixel_shuffle(x, r)

    @staticmethod
    def bicubic_resize(x, oh, ow):
        return _bicubic_resize(x, oh, ow)


class TapeOps:
    """Tape-backed counterpart of EagerOps; handles are tape nodes."""

    def __init__(self, tape):
        self.tape = tape

    def __getattr__(self, name):
        return getattr(self.tape, name)


def leaf_params(tape, net) -> dict:
    """Register every network parameter as a tape leaf."""
    return {name: tape.leaf(arr) for name, arr in named_params(net)}


def mbconv_apply(ops, conv: MultiBranchConv, x, params, prefix=""):
    """Multi-branch block forward: sum (or concat) of f_i(g_i(x)).

    In sum mode the branch sum is evaluated as one convolution over the
    channel-concatenated cascade outputs with the branch kernels stacked
    along the input-channel axis; that is the same sum, just as a single
    GEMM.
    """
    dot = "." if prefix else ""
    xp = ops.pad_const(x, 1)
    zs = []
    for i, br in enumerate(conv.branches):
        z = xp
        for j in range(len(br.cascade)):
            z = ops.conv2d(z, params[f"{prefix}{dot}br{i}.casc{j}.w"],
                           params[f"{prefix}{dot}br{i}.casc{j}.b"], 0)
        zs.append(z)
    mains_w = [params[f"{prefix}{dot}br{i}.main.w"] for i in range(conv.num_branches)]
    mains_b = [params[f"{prefix}{dot}br{i}.main.b"] for i in range(conv.num_branches)]
    if conv.merge == "sum":
        zc = zs[0] if len(zs) == 1 else ops.concat_channels(zs)
        wst = mains_w[0] if len(mains_w) == 1 else ops.stack_kernels(mains_w)
        return ops.conv2d(zc, wst, ops.sum_nodes(mains_b), 0)
    outs = [ops.conv2d(z, w, b, 0) for z, w, b in zip(zs, mains_w, mains_b)]
    return ops.concat_channels(outs)


def net_forward(ops, net, params, x):
    """Full SR forward on either backend; clamping is the caller's business."""
    scale = net.scale if isinstance(net, FusedNet) else net.config.scale
    u = ops.conv2d(x, params["head.w"], params["head.b"], 1)
    for bi, (c0, c1) in enumerate(net.body):
        if isinstance(c0, MultiBranchConv):
            t = mbconv_apply(ops, c0, u, params, f"body{bi}.conv0")
            t = mbconv_apply(ops, c1, ops.relu(t), params, f"body{bi}.conv1")
        else:
            t = ops.conv2d(u, params[f"body{bi}.conv0.w"],
                           params[f"body{bi}.conv0.b"], 1)
            t = ops.conv2d(ops.relu(t), params[f"body{bi}.conv1.w"],
                           params[f"body{bi}.conv1.b"], 1)
        u = ops.add(u, t)
    y = ops.conv2d(u, params["tail.w"], params["tail.b"], 1)
    y = ops.pixel_shuffle(y, scale)
    skip = net.global_skip if isinstance(net, FusedNet) else net.config.global_skip
    if skip:
        _, _, h, w = x.shape
        y = ops.add(y, ops.bicubic_resize(x, h * scale, w * scale))
    return y


def mbconv_forward(conv: MultiBranchConv, x: Tensor4) -> Tensor4:
    """Standalone eager forward of one multi-branch block."""
    if x.dims[1] != conv.channels:
        raise ChannelMismatch(
            f"input has {x.dims[1]} channels, block expects {conv.channels}")
    params = dict(p for i, br in enumerate(conv.branches)
                  for p in _branch_names(f"br{i}", br))
    return Tensor4(mbconv_apply(EagerOps, conv, x.data, params))


def sr_forward(net, lr: Tensor4, clamp: bool = False) -> Tensor4:
    """Super-resolve one (1,3,h,w) frame (or a batch of them)."""
    if lr.dims[1] != 3:
        raise ChannelMismatch(f"expected 3-channel input, got {lr.dims[1]}")
    params = dict(named_params(net))
    y = net_forward(EagerOps, net, params, lr.data)
    if clamp:
        y = np.clip(y, 0, 1)
    return Tensor4(y)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _uniform(rng, shape, bound):
    return (rng.uniform(-bound, bound, shape)).astype(np.float32)


def _init_conv3(rng, out_ch, in_ch):
    bound = 1.0 / np.sqrt(in_ch * 9)
    return ConvKernel(_uniform(rng, (out_ch, in_ch, 3, 3), bound),
                      np.zeros(out_ch, np.float32))


def _init_cascade(rng, ch):
    # near-identity channel map keeps an M-branch block close to M
    # copies of a plain conv at the start of training
    w = np.eye(ch, dtype=np.float32).reshape(ch, ch, 1, 1)
    w = w + _uniform(rng, (ch, ch, 1, 1), 0.01)
    return ConvKernel(w, np.zeros(ch, np.float32))


def build_backbone(config: BackboneConfig, seed: int = 0) -> SRNet:
    """Randomly initialized multi-branch backbone; deterministic in seed."""
    rng = np.random.default_rng(seed)
    c = config.channels
    head = _init_conv3(rng, c, 3)
    body = []
    for _ in range(config.blocks):
        pair = []
        for _ in range(2):
            branches = []
            for i in range(config.branches):
                cascade = [_init_cascade(rng, c) for _ in range(i)]
                branches.append(Branch(cascade, _init_conv3(rng, c, c)))
            pair.append(MultiBranchConv(c, "sum", branches))
        body.append(tuple(pair))
    tail = _init_conv3(rng, 3 * config.scale ** 2, c)
    return SRNet(config, head, body, tail)
