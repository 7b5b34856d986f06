"""Network building blocks: gated convolutions, batch norm, and the fixed
multi-scale feature extractor behind the perceptual/style losses.
"""

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

FEATURE_EXTRACTOR_SEED = 0x5EED


def kaiming_weight(rng, c_out, c_in, kernel, dtype):
    """Fan-in scaled normal init: std = sqrt(2 / (c_in * prod(kernel)))."""
    fan_in = c_in * int(np.prod(kernel))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in) + tuple(kernel))
    return Tensor(w.astype(dtype), requires_grad=True)


def zeros_bias(c_out, dtype):
    return Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


class Conv3dLayer:
    """Plain convolution with optional bias, used by the discriminator,
    the decoder side branch, and the tiny segmentation net."""

    def __init__(self, weight, bias=None, stride=1, padding=0, dilation=1):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    @classmethod
    def create(cls, rng, c_in, c_out, kernel=3, stride=1, padding=0, dilation=1,
               bias=True, dtype=np.float64):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        w = kaiming_weight(rng, c_out, c_in, kernel, dtype)
        b = zeros_bias(c_out, dtype) if bias else None
        return cls(w, b, stride, padding, dilation)

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding,
                        dilation=self.dilation)

    def parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps


class GatedConvLayer:
    """Gated convolution: a sigmoid gate computed from the input modulates the
    activated feature path elementwise,

        out = sigmoid(W_gt * I + b_gt) . f(W_nc * I + b_nc),

    with f a leaky ReLU. The gate keeps every output inside the feature
    activation's envelope, which lets the layer suppress contributions from
    erased voxels during inpainting. Gate and feature kernels share geometry.
    """

    def __init__(self, w_gate, b_gate, w_feat, b_feat, stride=1, padding=1,
                 dilation=1, slope=0.2):
        if w_gate.shape != w_feat.shape:
            raise DimensionError(
                f"gate / feature kernels differ: {w_gate.shape} vs {w_feat.shape}"
            )
        self.w_gate = w_gate
        self.b_gate = b_gate
        self.w_feat = w_feat
        self.b_feat = b_feat
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.slope = slope

    @classmethod
    def create(cls, rng, c_in, c_out, kernel=3, stride=1, padding=1, dilation=1,
               slope=0.2, dtype=np.float64):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        return cls(
            kaiming_weight(rng, c_out, c_in, kernel, dtype),
            zeros_bias(c_out, dtype),
            kaiming_weight(rng, c_out, c_in, kernel, dtype),
            zeros_bias(c_out, dtype),
            stride, padding, dilation, slope,
        )

    def forward(self, x):
        gate = T.conv3d(x, self.w_gate, self.b_gate, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)
        feat = T.conv3d(x, self.w_feat, self.b_feat, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)
        return T.mul(T.sigmoid(gate), T.leaky_relu(feat, self.slope))

    def parameters(self):
        return [("w_gate", self.w_gate), ("b_gate", self.b_gate),
                ("w_feat", self.w_feat), ("b_feat", self.b_feat)]


def gated_conv_forward(layer, x):
    return layer.forward(x)


def dilated_gated_conv_forward(layer, x):
    """Gated convolution with a widened receptive field (dilation 2 or 4)."""
    return layer.forward(x)


class BatchNormLayer:
    """Per-channel batch normalization over (batch, spatial) axes.

    Training mode normalizes by batch statistics and updates the running
    mean/var (population variance, no Bessel correction); eval mode applies
    the stored running statistics.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training=True):
        if x.ndim == 4:  # (C,X,Y,Z): single sample
            axes, cshape = (1, 2, 3), (-1, 1, 1, 1)
        elif x.ndim == 5:  # (B,C,X,Y,Z)
            axes, cshape = (0, 2, 3, 4), (1, -1, 1, 1, 1)
        else:
            raise DimensionError(f"batch norm expects 4D/5D input, got {x.shape}")
        gamma = T.reshape(self.gamma, cshape)
        beta = T.reshape(self.beta, cshape)
        if training:
            mu = T.reduce_mean(x, axis=axes, keepdims=True)
            xc = T.sub(x, mu)
            var = T.reduce_mean(T.mul(xc, xc), axis=axes, keepdims=True)
            xhat = T.div(xc, T.sqrt(T.add(var, self.eps)))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            mu = Tensor(self.running_mean.reshape(cshape).astype(x.dtype))
            sd = Tensor(
                np.sqrt(self.running_var + self.eps).reshape(cshape).astype(x.dtype)
            )
            xhat = T.div(T.sub(x, mu), sd)
        return T.add(T.mul(gamma, xhat), beta)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm_forward(layer, x, training=True):
    return layer.forward(x, training)


class FeatureExtractor:
    """Frozen multi-scale 2D feature embedding for perceptual/style losses.

    Three bias-free convolution stages (3x3, stride 2, ReLU) with fixed-seed
    weights; stage p halves the slice extent, so a 64x64 slice yields taps of
    32^2, 16^2, 8^2. Each stage's kernel matrix is rescaled so its operator
    norm is bounded by 1 (spectral estimate of the conv times the stride-2
    patch-overlap factor), keeping feature magnitudes stable across depths.
    Slices are processed independently: internally a volume is convolved with
    kz = 1 kernels, which never mixes z.
    """

    CHANNELS = (16, 32, 64)

    def __init__(self, seed=FEATURE_EXTRACTOR_SEED, dtype=np.float64):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c_out in self.CHANNELS:
            w = rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3, 1))
            sigma = np.linalg.svd(w.reshape(c_out, -1), compute_uv=False)[0]
            # ||conv||_2 <= sigma * sqrt(ceil(3/2)^2) = 2*sigma for stride-2 3x3
            w = w / (2.0 * sigma)
            self.weights.append(Tensor(w.astype(dtype), requires_grad=False))
            c_in = c_out

    @property
    def num_stages(self):
        return len(self.weights)

    def features_volume(self, vol):
        """Taps for every z-slice at once: (1,X,Y,Z) -> [(C_p, X_p, Y_p, Z)]."""
        if vol.ndim != 4 or vol.shape[0] != 1:
            raise DimensionError(f"expected a (1,X,Y,Z) volume, got {vol.shape}")
        taps = []
        h = vol
        for w in self.weights:
            h = T.relu(T.conv3d(h, w, stride=(2, 2, 1), padding=(1, 1, 0)))
            taps.append(h)
        return taps

    def extract_features(self, slice2d):
        """Taps for a single (1,X,Y) slice: stage p has extent ceil(X/2^p)."""
        if slice2d.ndim != 3 or slice2d.shape[0] != 1:
            raise DimensionError(f"expected a (1,X,Y) slice, got {slice2d.shape}")
        lifted = T.reshape(slice2d, (1,) + slice2d.shape[1:] + (1,))
        taps = self.features_volume(lifted)
        return [T.reshape(t, t.shape[:3]) for t in taps]
