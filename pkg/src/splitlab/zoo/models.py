"""Desk-scale model definitions: split classifier, style generator, AE, inverse net."""

from __future__ import annotations

import numpy as np

from splitlab import nn
from splitlab.nn import Stack

# split point k puts the boundary after block SPLIT_AFTER[k]
SPLIT_AFTER = {1: 2, 2: 3, 3: 4}


class SplitModel:
    """Six-block image classifier with a movable client/server boundary.

    ``widths`` are the channel counts of conv blocks 1..5; block 6 is the
    linear head.
    """

    kind = "target"

    def __init__(self, n_classes: int = 4, size: int = 16, widths=(8, 12, 16, 16, 32),
                 split_point: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.size = size
        self.widths = tuple(widths)
        c1, c2, c3, c4, c5 = self.widths
        self.blocks = [
            [nn.Conv2d(3, c1, 1, rng=rng), nn.ReLU()],
            [nn.Conv2d(c1, c2, 1, rng=rng), nn.ReLU()],
            [nn.Conv2d(c2, c3, 2, rng=rng), nn.ReLU()],
            [nn.Conv2d(c3, c4, 1, rng=rng), nn.ReLU()],
            [nn.Conv2d(c4, c5, 2, rng=rng), nn.ReLU()],
            [nn.Flatten(), nn.Dense(c5 * (size // 4) ** 2, n_classes, rng=rng)],
        ]
        self.full = Stack([layer for block in self.blocks for layer in block])
        self._views = {}
        self.split_point = split_point

    @property
    def split_point(self) -> int:
        return self._split_point

    @split_point.setter
    def split_point(self, value: int):
        if value not in SPLIT_AFTER:
            raise ValueError(f"split point must be one of {sorted(SPLIT_AFTER)}, got {value}")
        self._split_point = value

    def _boundary(self, split_point):
        return sum(len(b) for b in self.blocks[:SPLIT_AFTER[split_point]])

    def client(self, split_point: int | None = None) -> Stack:
        """Stack view of M_C; shares layer objects with :attr:`full`."""
        return self._view(split_point, client=True)

    def server(self, split_point: int | None = None) -> Stack:
        return self._view(split_point, client=False)

    def _view(self, split_point, client):
        sp = self.split_point if split_point is None else split_point
        key = (sp, client)
        if key not in self._views:
            k = self._boundary(sp)
            layers = self.full.layers[:k] if client else self.full.layers[k:]
            self._views[key] = Stack(layers)
        view = self._views[key]
        view._version = self.full._version
        return view

    def client_forward(self, x, split_point=None):
        if x.ndim != 4 or x.shape[1:] != (3, self.size, self.size):
            raise nn.ShapeError(f"expected images (N, 3, {self.size}, {self.size}), got {x.shape}")
        return self.client(split_point)(x)

    def server_forward(self, h, split_point=None):
        want = self.h_shape(split_point)
        if h.ndim != 4 or h.shape[1:] != want:
            raise nn.ShapeError(f"expected representations (N, {', '.join(map(str, want))}), got {h.shape}")
        return self.server(split_point)(h)

    def forward(self, x):
        return self.full(x)

    def h_shape(self, split_point=None):
        return self.client(split_point).output_shape((1, 3, self.size, self.size))[1:]

    def arch(self) -> dict:
        return {"n_classes": self.n_classes, "size": self.size, "split_point": self.split_point,
                **{f"width{i}": w for i, w in enumerate(self.widths)}}

    @classmethod
    def from_arch(cls, arch: dict) -> "SplitModel":
        widths = tuple(int(arch[f"width{i}"]) for i in range(5))
        return cls(int(arch["n_classes"]), int(arch["size"]), widths, int(arch["split_point"]))

    def params(self):
        return self.full.params()

    def set_params(self, params):
        self.full.set_params(params)

    def astype(self, dtype) -> "SplitModel":
        clone = SplitModel.from_arch(self.arch())
        clone.set_params({k: v.astype(dtype) for k, v in self.params().items()})
        return clone


class Generator:
    """Mapping MLP z -> w plus a synthesis network cut into ``H + 1`` blocks.

    Block 1 consumes a learned constant; every block holds two style-modulated
    convolutions conditioned on the same ``w``. Blocks after the first
    upsample 2x until the image side is reached; the last block ends in
    ``tanh`` rescaled to [0, 1].
    """

    kind = "generator"

    def __init__(self, z_dim: int = 32, w_dim: int = 32, channels=(32, 32, 16, 16), size: int = 16,
                 base: int = 4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.z_dim, self.w_dim, self.size, self.base = z_dim, w_dim, size, base
        self.channels = tuple(channels)
        self.mapping = Stack([nn.Dense(z_dim, 64, rng=rng), nn.LeakyReLU(0.2),
                              nn.Dense(64, w_dim, rng=rng)])
        self.const = rng.standard_normal((self.channels[0], base, base)).astype(np.float32)
        self.blocks: list[Stack] = []
        res, c_prev = base, self.channels[0]
        for i, c in enumerate(self.channels):
            layers = []
            if i > 0 and res < size:
                layers.append(nn.Upsample2x())
                res *= 2
            last = i == len(self.channels) - 1
            layers += [nn.StyleConv2d(c_prev, c, w_dim, rng=rng), nn.LeakyReLU(0.2), nn.InstanceNorm(c)]
            if last:
                layers += [nn.StyleConv2d(c, 3, w_dim, rng=rng), nn.Tanh(), nn.Rescale(0.5, 0.5)]
            else:
                layers += [nn.StyleConv2d(c, c, w_dim, rng=rng), nn.LeakyReLU(0.2), nn.InstanceNorm(c)]
            self.blocks.append(Stack(layers))
            c_prev = c
        if res != size:
            raise ValueError(f"channels {channels} do not reach image size {size} from base {base}")

    @property
    def depth(self) -> int:
        """H: the number of hierarchical features (blocks minus one)."""
        return len(self.blocks) - 1

    def map(self, z):
        return self.mapping(z)

    def feature_shape(self, i: int):
        """Shape (without batch) of hf_i, the output of block i."""
        shape = (1, *self.const.shape)
        for b in self.blocks[:i]:
            shape = b.output_shape(shape)
        return shape[1:]

    def _block_input(self, i, hf, n):
        if i == 1:
            return np.broadcast_to(self.const, (n, *self.const.shape))
        if hf is None or hf.shape[1:] != self.feature_shape(i - 1):
            got = None if hf is None else hf.shape[1:]
            raise nn.ShapeError(f"block {i} expects hf of shape {self.feature_shape(i - 1)}, got {got}")
        return hf

    def block_forward(self, i: int, hf, w):
        """Run block ``i`` (1-based); ``hf`` is the previous block's output (ignored for i=1)."""
        return self.blocks[i - 1].forward(self._block_input(i, hf, w.shape[0]), w)

    def remain_forward(self, stage: int, hf, w):
        """Blocks ``stage+1 .. H+1`` on ``hf`` (stage 0: full synthesis). Returns (x, caches)."""
        if not 0 <= stage <= self.depth:
            raise ValueError(f"stage must be in 0..{self.depth}, got {stage}")
        caches = []
        x = hf
        for i in range(stage + 1, self.depth + 2):
            x, c = self.block_forward(i, x, w)
            caches.append(c)
        return x, caches

    def remain_backward(self, stage: int, caches, g, need_params: bool = False):
        """Backward of :meth:`remain_forward`: (d hf, d w, param grads by block)."""
        dw = None
        pgrads = {}
        for i in range(self.depth + 1, stage, -1):
            res = self.blocks[i - 1].backward(caches[i - stage - 1], g, need_params)
            g = res.input
            dw = res.style if dw is None else dw + res.style
            if need_params:
                pgrads.update({f"block{i}.{k}": v for k, v in res.params.items()})
        if stage == 0:
            if need_params:
                pgrads["const"] = g.sum(axis=0)
            g = None
        return g, dw, pgrads

    def synthesize_from(self, stage: int, hf, w):
        return self.remain_forward(stage, hf, w)[0]

    def synthesize(self, w):
        return self.synthesize_from(0, None, w)

    def feature(self, i: int, w):
        """True prefix output hf_i = G_i(...G_1(w))."""
        x = None
        for j in range(1, i + 1):
            x = self.block_forward(j, x, w)[0]
        return x

    def sample(self, n: int, rng):
        z = rng.standard_normal((n, self.z_dim)).astype(self.const.dtype)
        return self.synthesize(self.map(z))

    def arch(self) -> dict:
        return {"z_dim": self.z_dim, "w_dim": self.w_dim, "size": self.size, "base": self.base,
                "n_blocks": len(self.channels), **{f"ch{i}": c for i, c in enumerate(self.channels)}}

    @classmethod
    def from_arch(cls, arch: dict) -> "Generator":
        chans = tuple(int(arch[f"ch{i}"]) for i in range(int(arch["n_blocks"])))
        return cls(int(arch["z_dim"]), int(arch["w_dim"]), chans, int(arch["size"]), int(arch["base"]))

    def params(self) -> dict:
        out = {f"map.{k}": v for k, v in self.mapping.params().items()}
        out["const"] = self.const
        for i, b in enumerate(self.blocks, start=1):
            out.update({f"block{i}.{k}": v for k, v in b.params().items()})
        return out

    def set_params(self, params: dict):
        groups: dict[str, dict] = {}
        for k, v in params.items():
            if k == "const":
                if v.shape != self.const.shape:
                    raise nn.ShapeError(f"const: expected {self.const.shape}, got {v.shape}")
                self.const = v
                continue
            head, rest = k.split(".", 1)
            groups.setdefault(head, {})[rest] = v
        for head, ps in groups.items():
            stack = self.mapping if head == "map" else self.blocks[int(head[5:]) - 1]
            stack.set_params(ps)

    def astype(self, dtype) -> "Generator":
        clone = Generator.from_arch(self.arch())
        clone.set_params({k: v.astype(dtype) for k, v in self.params().items()})
        return clone


def _decoder_layers(c_in, res, size, width, rng):
    layers = [nn.Conv2d(c_in, width, 1, rng=rng), nn.InstanceNorm(width), nn.LeakyReLU(0.2)]
    while res < size:
        layers += [nn.Upsample2x(), nn.Conv2d(width, width, 1, rng=rng), nn.LeakyReLU(0.2)]
        res *= 2
    layers += [nn.Conv2d(width, 3, 1, rng=rng), nn.Tanh(), nn.Rescale(0.5, 0.5)]
    return layers


class Autoencoder:
    kind = "autoencoder"

    def __init__(self, size: int = 16, code_channels: int = 16, width: int = 32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.size, self.code_channels, self.width = size, code_channels, width
        self.encoder = Stack([nn.Conv2d(3, width, 2, rng=rng), nn.LeakyReLU(0.2),
                              nn.Conv2d(width, code_channels, 2, rng=rng), nn.LeakyReLU(0.2)])
        self.decoder = Stack(_decoder_layers(code_channels, size // 4, size, width, rng))
        self.stack = Stack(self.encoder.layers + self.decoder.layers)

    def __call__(self, x):
        return self.stack(x)

    def arch(self):
        return {"size": self.size, "code_channels": self.code_channels, "width": self.width}

    @classmethod
    def from_arch(cls, arch):
        return cls(int(arch["size"]), int(arch["code_channels"]), int(arch["width"]))

    def params(self):
        return self.stack.params()

    def set_params(self, params):
        self.stack.set_params(params)


class InverseNet:
    """Decoder from one split point's representation space back to images."""

    kind = "inverse"

    def __init__(self, h_shape, size: int = 16, width: int = 32, split_point: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.h_shape = tuple(h_shape)
        self.size, self.width, self.split_point = size, width, split_point
        c, res, _ = self.h_shape
        self.stack = Stack(_decoder_layers(c, res, size, width, rng))

    def __call__(self, h):
        return self.stack(h)

    def arch(self):
        c, hh, ww = self.h_shape
        return {"h_c": c, "h_h": hh, "h_w": ww, "size": self.size, "width": self.width,
                "split_point": self.split_point}

    @classmethod
    def from_arch(cls, arch):
        return cls((int(arch["h_c"]), int(arch["h_h"]), int(arch["h_w"])), int(arch["size"]),
                   int(arch["width"]), int(arch["split_point"]))

    def params(self):
        return self.stack.params()

    def set_params(self, params):
        self.stack.set_params(params)


def make_discriminator(size: int = 16, rng=None) -> Stack:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Stack([nn.Conv2d(3, 32, 2, rng=rng), nn.LeakyReLU(0.2), nn.MinibatchStd(),
                  nn.Conv2d(33, 64, 2, rng=rng), nn.LeakyReLU(0.2),
                  nn.Flatten(), nn.Dense(64 * (size // 4) ** 2, 1, rng=rng)])
