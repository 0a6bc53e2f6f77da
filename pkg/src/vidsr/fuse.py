"""Collapse multi-branch convolution blocks into single 3x3 convolutions.

A 1x1 cascade followed by a 3x3 conv is an affine map followed by a
convolution, so it folds into one 3x3 kernel; parallel branches with
identical configuration fold by kernel summation (sum merge) or by
stacking along the output-channel axis (concat merge). All folding
arithmetic runs in float64 and is stored back as float32.
"""

from __future__ import annotations

import numpy as np

from .network import BackboneConfig, Branch, FusedNet, MultiBranchConv, SRNet
from .tensor import ChannelMismatch, ConvKernel, ShapeMismatch


def fold_cascade(cascade, in_channels: int):
    """Fold a chain of 1x1 convolutions into one affine map (W, b).

    Passing a value v through the chain equals W @ v + b.
    """
    w = np.eye(in_channels, dtype=np.float64)
    b = np.zeros(in_channels, np.float64)
    for k in cascade:
        if k.size != 1:
            raise ShapeMismatch("cascade kernels must be 1x1")
        if k.in_channels != w.shape[0]:
            raise ChannelMismatch(
                f"cascade chain breaks: {w.shape[0]} -> {k.in_channels}")
        m = np.asarray(k.weight[:, :, 0, 0], np.float64)
        b = m @ b + np.asarray(k.bias, np.float64)
        w = m @ w
    return w, b


def fuse_cascade(cascade, conv3: ConvKernel) -> ConvKernel:
    """Fold (1x1 cascade, 3x3 conv) into one 3x3 conv.

    The result, applied with padding 1 and zero padding, reproduces the
    sequential forward under the block border convention exactly: the
    cascade maps the zero ring to its accumulated bias, and that bias is
    folded into the fused bias term here.
    """
    if conv3.size != 3:
        raise ShapeMismatch("expected a 3x3 kernel to fold into")
    cascade = list(cascade)
    in_ch = cascade[0].in_channels if cascade else conv3.in_channels
    w_chain, b_chain = fold_cascade(cascade, in_ch)
    if w_chain.shape[0] != conv3.in_channels:
        raise ChannelMismatch(
            f"cascade emits {w_chain.shape[0]} channels, conv expects "
            f"{conv3.in_channels}")
    q3 = np.asarray(conv3.weight, np.float64)
    fused_w = np.einsum("omuv,mi->oiuv", q3, w_chain)
    fused_b = np.asarray(conv3.bias, np.float64) + np.einsum(
        "omuv,m->o", q3, b_chain)
    return ConvKernel(fused_w.astype(np.float32), fused_b.astype(np.float32))


def _check_same_config(kernels, same_out=True):
    first = kernels[0]
    for k in kernels[1:]:
        if k.size != first.size or k.in_channels != first.in_channels:
            raise ShapeMismatch("parallel branches must share kernel config")
        if same_out and k.out_channels != first.out_channels:
            raise ShapeMismatch("parallel sum needs equal output widths")


def fuse_parallel_sum(kernels) -> ConvKernel:
    """Merge same-config parallel branches by summing kernels and biases."""
    kernels = list(kernels)
    _check_same_config(kernels)
    w = np.sum([np.asarray(k.weight, np.float64) for k in kernels], axis=0)
    b = np.sum([np.asarray(k.bias, np.float64) for k in kernels], axis=0)
    return ConvKernel(w.astype(np.float32), b.astype(np.float32))


def fuse_parallel_concat(kernels) -> ConvKernel:
    """Merge parallel branches by stacking along the output-channel axis."""
    kernels = list(kernels)
    _check_same_config(kernels, same_out=False)
    w = np.concatenate([k.weight for k in kernels], axis=0)
    b = np.concatenate([k.bias for k in kernels], axis=0)
    return ConvKernel(w, b)


def fuse_block(conv: MultiBranchConv) -> ConvKernel:
    """Collapse one multi-branch block into a single 3x3 convolution."""
    per_branch = [fuse_cascade(br.cascade, br.main) for br in conv.branches]
    if conv.merge == "sum":
        return fuse_parallel_sum(per_branch)
    return fuse_parallel_concat(per_branch)


def fuse_network(net) -> FusedNet:
    """Collapse every body block; head and tail are copied unchanged.

    Accepts an already-fused network and returns an equal copy, so the
    operation is idempotent.
    """
    if isinstance(net, FusedNet):
        return FusedNet(net.channels, net.scale, net.global_skip,
                        net.head, list(net.body), net.tail)
    body = []
    for c0, c1 in net.body:
        for conv in (c0, c1):
            if conv.merge != "sum":
                raise ShapeMismatch(
                    "concat-merge blocks change the channel count and "
                    "cannot sit inside a residual body")
        body.append((fuse_block(c0), fuse_block(c1)))
    return FusedNet(net.config.channels, net.config.scale,
                    net.config.global_skip, net.head, body, net.tail)


def as_single_branch(net: FusedNet) -> SRNet:
    """View a fused network as an M=1 multi-branch network."""
    config = BackboneConfig(channels=net.channels, blocks=len(net.body),
                            branches=1, scale=net.scale,
                            global_skip=net.global_skip)
    body = [tuple(MultiBranchConv(net.channels, "sum", [Branch((), k)])
                  for k in pair)
            for pair in net.body]
    return SRNet(config, net.head, body, net.tail)
