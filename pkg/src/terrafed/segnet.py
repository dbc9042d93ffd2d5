"""Three-group segmentation network: shallow / deep backbone + expandable head.

Shallow = one 3->8 conv, deep = two convs (8->16, 16->16), head = pointwise
16->C classifier. Every parameter belongs to exactly one group; the head can
gain class rows at task boundaries without touching anything else.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

FEATURE_DIM = 16


class LayerGroup(Enum):
    SHALLOW = "shallow"
    DEEP = "deep"
    HEAD = "head"


GROUPS = (LayerGroup.SHALLOW, LayerGroup.DEEP, LayerGroup.HEAD)

# (name, group, layer kind); layer order is the forward order
_LAYOUT = (
    ("shallow.conv.kernel", LayerGroup.SHALLOW),
    ("shallow.conv.bias", LayerGroup.SHALLOW),
    ("deep.conv1.kernel", LayerGroup.DEEP),
    ("deep.conv1.bias", LayerGroup.DEEP),
    ("deep.conv2.kernel", LayerGroup.DEEP),
    ("deep.conv2.bias", LayerGroup.DEEP),
    ("head.weight", LayerGroup.HEAD),
    ("head.bias", LayerGroup.HEAD),
)

_GROUP_OF = {name: group for name, group in _LAYOUT}

# per group: (kernel-or-weight name, bias name) pairs in forward order
GROUP_LAYERS = {
    LayerGroup.SHALLOW: (("shallow.conv.kernel", "shallow.conv.bias"),),
    LayerGroup.DEEP: (
        ("deep.conv1.kernel", "deep.conv1.bias"),
        ("deep.conv2.kernel", "deep.conv2.bias"),
    ),
    LayerGroup.HEAD: (("head.weight", "head.bias"),),
}


def group_of(name: str) -> LayerGroup:
    return _GROUP_OF[name]


class SegNet:
    """Holds named parameter tensors and runs the forward pass."""

    def __init__(self, params: dict[str, Tensor]):
        for name, _ in _LAYOUT:
            if name not in params:
                raise DimensionError(f"missing parameter {name}")
        self.params = {name: params[name] for name, _ in _LAYOUT}

    @classmethod
    def init_random(cls, class_count: int, rng: np.random.Generator) -> "SegNet":
        def conv_init(cout, cin):
            # Kaiming-uniform with relu gain, so feature scale survives depth
            a = float(np.sqrt(6.0 / (cin * 9)))
            return rng.uniform(-a, a, size=(cout, cin, 3, 3))

        head_a = float(np.sqrt(3.0 / FEATURE_DIM))
        # small positive conv biases keep relu units alive at init
        params = {
            "shallow.conv.kernel": Tensor(conv_init(8, 3), requires_grad=True),
            "shallow.conv.bias": Tensor(np.full(8, 0.05), requires_grad=True),
            "deep.conv1.kernel": Tensor(conv_init(16, 8), requires_grad=True),
            "deep.conv1.bias": Tensor(np.full(16, 0.05), requires_grad=True),
            "deep.conv2.kernel": Tensor(conv_init(16, 16), requires_grad=True),
            "deep.conv2.bias": Tensor(np.full(16, 0.05), requires_grad=True),
            "head.weight": Tensor(
                rng.uniform(-head_a, head_a, size=(class_count, FEATURE_DIM)), requires_grad=True
            ),
            "head.bias": Tensor(np.zeros(class_count), requires_grad=True),
        }
        return cls(params)

    @property
    def class_count(self) -> int:
        return self.params["head.weight"].shape[0]

    def param_items(self):
        return self.params.items()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def group_params(self, group: LayerGroup) -> dict[str, Tensor]:
        return {n: self.params[n] for n, g in _LAYOUT if g is group}

    def clone(self) -> "SegNet":
        return SegNet(
            {n: Tensor(p.data, requires_grad=p.requires_grad) for n, p in self.params.items()}
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def features(self, image: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Deep feature map [16,H,W] before the head; batched for [N,3,H,W]."""
        p = params if params is not None else self.params
        channel_axis = 1 if image.data.ndim == 4 else 0
        if image.shape[channel_axis] != 3:
            raise DimensionError(f"expected 3 input channels, got {image.shape[channel_axis]}")
        # center unit-interval inputs; images are constants, so no grad is lost
        centered = Tensor(image.data - 0.5)
        h = T.relu(T.conv2d(centered, p["shallow.conv.kernel"], p["shallow.conv.bias"]))
        h = T.relu(T.conv2d(h, p["deep.conv1.kernel"], p["deep.conv1.bias"]))
        return T.relu(T.conv2d(h, p["deep.conv2.kernel"], p["deep.conv2.bias"]))

    def head(self, feats: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        p = params if params is not None else self.params
        return T.pointwise_conv(feats, p["head.weight"], p["head.bias"])

    def forward(
        self,
        image: Tensor,
        params: dict[str, Tensor] | None = None,
        return_features: bool = False,
    ):
        feats = self.features(image, params)
        logits = self.head(feats, params)
        return (logits, feats) if return_features else logits


def expand_head(net: SegNet, n_new: int, init_scale: float, rng: np.random.Generator) -> SegNet:
    """New network with n_new extra class rows; everything else bitwise equal.

    New weight rows are uniform(-init_scale, init_scale); new biases are zero.
    """
    if n_new < 1:
        raise ContractError("expand_head requires n_new >= 1")
    out = net.clone()
    old_w = out.params["head.weight"].data
    old_b = out.params["head.bias"].data
    new_rows = rng.uniform(-init_scale, init_scale, size=(n_new, FEATURE_DIM))
    out.params["head.weight"] = Tensor(np.vstack([old_w, new_rows]), requires_grad=True)
    out.params["head.bias"] = Tensor(np.concatenate([old_b, np.zeros(n_new)]), requires_grad=True)
    return out


def replace_group(base: SegNet, donor: SegNet, group: LayerGroup) -> SegNet:
    """Copy of base with `group` taken from donor.

    For the head, the donor may know more classes; only the base's class rows
    are copied.
    """
    out = base.clone()
    if group is LayerGroup.HEAD:
        c = base.class_count
        if donor.class_count < c:
            raise DimensionError("donor head has fewer classes than base")
        out.params["head.weight"] = Tensor(donor.params["head.weight"].data[:c], requires_grad=True)
        out.params["head.bias"] = Tensor(donor.params["head.bias"].data[:c], requires_grad=True)
        return out
    for name in base.group_params(group):
        if donor.params[name].shape != base.params[name].shape:
            raise DimensionError(f"incompatible shapes for {name}")
        out.params[name] = Tensor(donor.params[name].data, requires_grad=True)
    return out


@dataclass
class ChannelSummary:
    """Per-output-channel population mean and variance, kernel + bias pooled."""

    per_channel_mean: np.ndarray
    per_channel_var: np.ndarray

    def vector(self) -> np.ndarray:
        """[means; vars] concatenation, the generator input form."""
        return np.concatenate([self.per_channel_mean, self.per_channel_var])

    @property
    def channel_count(self) -> int:
        return self.per_channel_mean.size


def channel_summary(kernel: np.ndarray, bias: np.ndarray) -> ChannelSummary:
    """Summary of one layer whose leading dimension is output channels."""
    c = kernel.shape[0]
    flat = kernel.reshape(c, -1)
    pooled = np.concatenate([flat, bias.reshape(c, 1)], axis=1)
    # shift by the first entry so constant channels get exactly zero variance
    shifted = pooled - pooled[:, :1]
    shifted_mean = shifted.mean(axis=1)
    var = ((shifted - shifted_mean[:, None]) ** 2).mean(axis=1)
    return ChannelSummary(pooled[:, 0] + shifted_mean, var)


def group_summary(arrays: dict[str, np.ndarray], group: LayerGroup) -> ChannelSummary:
    """Concatenated layer summaries for a whole group, forward-layer order."""
    means, variances = [], []
    for kname, bname in GROUP_LAYERS[group]:
        s = channel_summary(arrays[kname], arrays[bname])
        means.append(s.per_channel_mean)
        variances.append(s.per_channel_var)
    return ChannelSummary(np.concatenate(means), np.concatenate(variances))


def group_channel_widths(group: LayerGroup, class_count: int) -> tuple[int, ...]:
    """Output-channel count of each layer in the group, forward order."""
    if group is LayerGroup.SHALLOW:
        return (8,)
    if group is LayerGroup.DEEP:
        return (16, 16)
    return (class_count,)
