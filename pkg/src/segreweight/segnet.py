"""Miniature U-Net producing per-pixel two-class probability maps.

Layout for ``depth`` levels with ``c = base_channels``::

    enc{l}: conv3x3(in_l -> c*2^l) + ReLU, kept as skip l, then maxpool2   (l = 0..depth-1)
    dec{l}: upsample2, concat skip l, conv3x3 -> c*2^l + ReLU             (l = depth-1..0)
    head:   conv1x1(c -> 2), softmax over the class axis

Parameter order is ``enc0.w, enc0.b, ..., enc{D-1}.b, dec{D-1}.w, ..., dec0.b,
head.w, head.b``.  The decoder input at level l has ``c*2^(l+1)`` upsampled
channels (``c*2^(D-1)`` at the deepest level) plus ``c*2^l`` skip channels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .ndcore import ops


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 3
    base_channels: int = 8
    depth: int = 2
    image_side: int = 24
    init_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> "NetConfig":
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ContractError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels < 1:
            raise ContractError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.image_side < 2 ** self.depth or self.image_side % (2 ** self.depth):
            raise ContractError(f"image_side {self.image_side} not divisible by 2^depth = {2 ** self.depth}")
        if self.init_sigma < 0:
            raise ContractError("init_sigma must be nonnegative")
        return self

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    cfg.validate()
    c, d = cfg.base_channels, cfg.depth
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.input_channels
    for lvl in range(d):
        cout = c * 2 ** lvl
        shapes[f"enc{lvl}.w"] = (cout, cin, 3, 3)
        shapes[f"enc{lvl}.b"] = (cout,)
        cin = cout
    for lvl in reversed(range(d)):
        cout = c * 2 ** lvl
        cin_dec = cin + cout
        shapes[f"dec{lvl}.w"] = (cout, cin_dec, 3, 3)
        shapes[f"dec{lvl}.b"] = (cout,)
        cin = cout
    shapes["head.w"] = (2, c, 1, 1)
    shapes["head.b"] = (2,)
    return shapes


def count_params(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: NetConfig, dtype=np.float64) -> dict[str, np.ndarray]:
    """Gaussian weights N(0, init_sigma^2), zero biases; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (cfg.init_sigma * rng.standard_normal(shape)).astype(dtype)
    return params


def check_params(params, cfg: NetConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params.keys()) != list(shapes.keys()):
        raise ContractError("parameter names do not match the network configuration")
    for k, s in shapes.items():
        if tuple(params[k].shape) != s:
            raise ContractError(f"parameter '{k}' has shape {tuple(params[k].shape)}, expected {s}")


def logits(params, images, depth: int):
    skips = []
    x = images
    for lvl in range(depth):
        x = ops.relu(ops.conv2d(x, params[f"enc{lvl}.w"], params[f"enc{lvl}.b"]))
        skips.append(x)
        x = ops.maxpool2(x)
    for lvl in reversed(range(depth)):
        x = ops.concat([ops.upsample2(x), skips[lvl]], axis=1)
        x = ops.relu(ops.conv2d(x, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"]))
    return ops.conv2d(x, params["head.w"], params["head.b"])


def forward(params, images, cfg: NetConfig):
    """Class probabilities ``[B, 2, H, W]`` for images ``[B, C, H, W]``.

    Works on plain arrays or traced values alike.
    """
    shape = images.shape
    if len(shape) != 4 or shape[1] != cfg.input_channels or shape[2] != cfg.image_side or shape[3] != cfg.image_side:
        raise ContractError(
            f"images must be [B,{cfg.input_channels},{cfg.image_side},{cfg.image_side}], got {tuple(shape)}")
    return ops.softmax(logits(params, images, cfg.depth), axis=1)


def predict_masks(params, images, cfg: NetConfig) -> np.ndarray:
    """Binary masks; a pixel is lesion only if its lesion probability exceeds 0.5."""
    prob = forward(params, images, cfg)
    return (prob[:, 1] > 0.5).astype(np.uint8)
