"""RicherDG generator and conditional patch discriminator.

The generator is a dilated-gated encoder plus a richer-convolutional decoder:
gated convolutions throughout, two dilated-gated layers (dilation 2 and 4)
around the bottleneck, long skip concatenations into the decoder, and a side
branch that taps decoder pairs through 1x1x1 convolutions and trilinear
upsampling to produce four full-resolution side outputs for boundary
supervision.

Channel widths scale with ``width`` (64 reproduces the published layer
table); any multiple-of-4 cube extent >= 16 works since the network is fully
convolutional.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNormLayer, Conv3dLayer, GatedConvLayer
from .tensor import DimensionError, Tensor


@dataclass
class GeneratorOutput:
    y_hat: Tensor
    side_outputs: tuple

    def __post_init__(self):
        if len(self.side_outputs) != 4:
            raise ValueError(
                f"generator must emit exactly 4 side outputs, got {len(self.side_outputs)}"
            )


class RicherDG:
    """Gated-convolution inpainting generator with a multi-scale side branch."""

    def __init__(self, seed=0, width=64, dtype=np.float64, slope=0.2):
        if width % 4 != 0:
            raise ValueError(f"width must be a multiple of 4, got {width}")
        self.seed = seed
        self.width = width
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        w = width

        def gc(c_in, c_out, stride=1, dilation=1):
            return GatedConvLayer.create(
                rng, c_in, c_out, kernel=3, stride=stride, padding=dilation,
                dilation=dilation, slope=slope, dtype=self.dtype,
            )

        # encoder: full -> /2 -> /4 extent, then dilation 2 and 4
        self.gconv1 = gc(2, w)
        self.gconv2 = gc(w, 2 * w, stride=2)
        self.gconv3 = gc(2 * w, 2 * w)
        self.gconv4 = gc(2 * w, 4 * w, stride=2)
        self.gconv5 = gc(4 * w, 4 * w)
        self.gconv6 = gc(4 * w, 4 * w)
        self.dgconv1 = gc(4 * w, 4 * w, dilation=2)
        # decoder: second dilated layer first, two gated pairs between upsamples
        self.dgconv2 = gc(4 * w, 4 * w, dilation=4)
        self.gconv7 = gc(4 * w, 4 * w)
        self.gconv8 = gc(4 * w, 4 * w)
        self.gconv9 = gc(8 * w, 2 * w)
        self.gconv10 = gc(2 * w, 2 * w)
        self.gconv11 = gc(4 * w, w)
        self.gconv12 = gc(w, w)
        self.gconv13 = gc(w, 1)
        # side branch: 1x1x1 fusions of decoder pairs
        self.conv1 = Conv3dLayer.create(rng, 4 * w, 1, kernel=1, dtype=self.dtype)
        self.conv2 = Conv3dLayer.create(rng, 2 * w, 1, kernel=1, dtype=self.dtype)
        self.conv3 = Conv3dLayer.create(rng, w, 1, kernel=1, dtype=self.dtype)
        self.conv4 = Conv3dLayer.create(rng, 3, 1, kernel=1, dtype=self.dtype)

    _LAYERS = (
        "gconv1", "gconv2", "gconv3", "gconv4", "gconv5", "gconv6", "dgconv1",
        "dgconv2", "gconv7", "gconv8", "gconv9", "gconv10", "gconv11",
        "gconv12", "gconv13", "conv1", "conv2", "conv3", "conv4",
    )

    def parameters(self):
        out = []
        for name in self._LAYERS:
            for pname, p in getattr(self, name).parameters():
                out.append((f"{name}.{pname}", p))
        return out

    def num_parameters(self):
        return sum(p.size for _, p in self.parameters())

    def _check_input(self, x_erased, mask):
        if x_erased.ndim != 4 or x_erased.shape[0] != 1:
            raise DimensionError(f"x_erased must be (1,X,Y,Z), got {x_erased.shape}")
        if mask.shape != x_erased.shape:
            raise DimensionError(
                f"mask shape {mask.shape} != input shape {x_erased.shape}"
            )
        ext = x_erased.shape[1:]
        for a, name in enumerate("XYZ"):
            if ext[a] % 4 != 0 or ext[a] < 16:
                raise DimensionError(
                    f"axis {name}: extent {ext[a]} unsupported (needs a multiple "
                    "of 4, at least 16)"
                )

    def forward(self, x_erased, mask, collect_shapes=None):
        """Run the generator on one sample.

        ``x_erased`` and ``mask`` are (1,X,Y,Z); the two are stacked into the
        2-channel input. Returns a :class:`GeneratorOutput` with the inpainted
        volume and the four side outputs, all (1,X,Y,Z). ``collect_shapes``
        may be a dict which is filled with every intermediate's shape.
        """
        self._check_input(x_erased, mask)
        h = {}
        h["input"] = T.concat([x_erased, mask], axis=0)
        h["gconv1"] = self.gconv1.forward(h["input"])
        h["gconv2"] = self.gconv2.forward(h["gconv1"])
        h["gconv3"] = self.gconv3.forward(h["gconv2"])
        h["gconv4"] = self.gconv4.forward(h["gconv3"])
        h["gconv5"] = self.gconv5.forward(h["gconv4"])
        h["gconv6"] = self.gconv6.forward(h["gconv5"])
        h["dgconv1"] = self.dgconv1.forward(h["gconv6"])
        h["dgconv2"] = self.dgconv2.forward(h["dgconv1"])
        h["gconv7"] = self.gconv7.forward(h["dgconv2"])
        h["gconv8"] = self.gconv8.forward(h["gconv7"])
        skip9 = T.trilinear_upsample(T.concat([h["gconv8"], h["gconv4"]], axis=0), 2)
        h["gconv9"] = self.gconv9.forward(skip9)
        h["gconv10"] = self.gconv10.forward(h["gconv9"])
        skip11 = T.trilinear_upsample(T.concat([h["gconv10"], h["gconv2"]], axis=0), 2)
        h["gconv11"] = self.gconv11.forward(skip11)
        h["gconv12"] = self.gconv12.forward(h["gconv11"])
        h["gconv13"] = self.gconv13.forward(h["gconv12"])

        h["conv1"] = self.conv1.forward(T.add(h["gconv7"], h["gconv8"]))
        h["conv2"] = self.conv2.forward(T.add(h["gconv9"], h["gconv10"]))
        h["conv3"] = self.conv3.forward(T.add(h["gconv11"], h["gconv12"]))
        h["up1"] = T.trilinear_upsample(h["conv1"], 4)
        h["up2"] = T.trilinear_upsample(h["conv2"], 2)
        h["conv4"] = self.conv4.forward(T.concat([h["conv3"], h["up1"], h["up2"]], axis=0))

        if collect_shapes is not None:
            collect_shapes.update({k: v.shape for k, v in h.items()})
        return GeneratorOutput(
            y_hat=h["gconv13"],
            side_outputs=(h["up1"], h["up2"], h["conv3"], h["conv4"]),
        )


def generator_forward(params, x_erased, mask, collect_shapes=None):
    return params.forward(x_erased, mask, collect_shapes)


class PatchDiscriminator:
    """Conditional patch discriminator over (condition, candidate) stacks.

    Four blocks of (conv, leaky ReLU, batch norm) with strides 2,2,2,1 and a
    final 1-channel conv + sigmoid: a 64^3 input maps to an 8^3 grid of
    patch probabilities, each value in (0,1).
    """

    def __init__(self, seed=1, width=64, dtype=np.float64, slope=0.2):
        self.seed = seed
        self.width = width
        self.dtype = np.dtype(dtype).type
        self.slope = slope
        rng = np.random.default_rng(seed)
        w = width
        plan = [(3, w, 2), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 8 * w, 1)]
        self.blocks = []
        for c_in, c_out, stride in plan:
            conv = Conv3dLayer.create(rng, c_in, c_out, kernel=3, stride=stride,
                                      padding=1, dtype=self.dtype)
            bn = BatchNormLayer(c_out, dtype=self.dtype)
            self.blocks.append((conv, bn))
        self.final = Conv3dLayer.create(rng, 8 * w, 1, kernel=3, stride=1,
                                        padding=1, dtype=self.dtype)

    def forward(self, condition, candidate, training=True):
        """condition (.,2,X,Y,Z) + candidate (.,1,X,Y,Z) -> patch map in (0,1)."""
        axis = 1 if condition.ndim == 5 else 0
        if condition.shape[axis] != 2 or candidate.shape[axis] != 1:
            raise DimensionError(
                f"expected 2-channel condition and 1-channel candidate, got "
                f"{condition.shape} / {candidate.shape}"
            )
        h = T.concat([condition, candidate], axis=axis)
        for conv, bn in self.blocks:
            h = bn.forward(T.leaky_relu(conv.forward(h), self.slope), training)
        return T.sigmoid(self.final.forward(h))

    def parameters(self):
        out = []
        for i, (conv, bn) in enumerate(self.blocks):
            for pname, p in conv.parameters():
                out.append((f"block{i}.conv.{pname}", p))
            for pname, p in bn.parameters():
                out.append((f"block{i}.bn.{pname}", p))
        for pname, p in self.final.parameters():
            out.append((f"final.{pname}", p))
        return out

    def bn_state(self):
        return {
            f"block{i}.bn.{k}": v
            for i, (_, bn) in enumerate(self.blocks)
            for k, v in bn.state().items()
        }

    def num_parameters(self):
        return sum(p.size for _, p in self.parameters())


def discriminator_forward(params, condition, candidate, training=True):
    return params.forward(condition, candidate, training)


def init_generator(seed, width=64, dtype=np.float64):
    return RicherDG(seed=seed, width=width, dtype=dtype)


def init_discriminator(seed, width=64, dtype=np.float64):
    return PatchDiscriminator(seed=seed, width=width, dtype=dtype)
