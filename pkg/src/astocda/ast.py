"""Amplitude spectrum auto-encoder over feature channels.

Each channel of a feature map h (N, C, H, W) is encoded independently with
shared weights:

    latent  = Q_e(T(|F(resize(h))|))            per channel, unit norm
    output  = F^-1(resize_back(T^-1(Q_d(latent))), angle(F(h)))

The phase is taken from h at its own resolution and never leaves that grid;
only the amplitude travels through the fixed-size encoder/decoder.
"""

import itertools
import math

import numpy as np

from . import spectral
from .errors import ConfigurationError, InvariantError, TrainingDivergence
from .optim import SGD, poly_lr
from .tensor import (
    Tensor,
    as_tensor,
    bilinear_resize,
    linear,
    mse,
    no_grad,
    parameter,
    relu,
    unit_normalize,
)


class AstModule:
    def __init__(
        self,
        resize_h=16,
        resize_w=32,
        d_latent=64,
        d_hidden=256,
        seed=0,
        bypass=False,
    ):
        spectral.check_dims(resize_h, resize_w)
        self.resize_h = resize_h
        self.resize_w = resize_w
        self.d_latent = d_latent
        self.d_hidden = d_hidden
        self.bypass = bypass
        self.frozen = False
        # orthonormal DFT scaling keeps encoder inputs O(feature scale)
        self.amp_scale = math.sqrt(resize_h * resize_w)
        rng = np.random.default_rng(seed)
        d_in = self.input_dim

        def dense(fan_in, fan_out, gain):
            return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))

        self.params = {
            "enc1/weight": parameter(dense(d_in, d_hidden, math.sqrt(2.0))),
            "enc1/bias": parameter(np.zeros(d_hidden)),
            "enc2/weight": parameter(dense(d_hidden, d_latent, 1.0)),
            "enc2/bias": parameter(np.zeros(d_latent)),
            "dec1/weight": parameter(dense(d_latent, d_hidden, math.sqrt(2.0))),
            "dec1/bias": parameter(np.zeros(d_hidden)),
            # zero decoder head: the untrained module reconstructs a zero-amplitude plane
            "dec2/weight": parameter(np.zeros((d_hidden, d_in))),
            "dec2/bias": parameter(np.zeros(d_in)),
        }
        for name, p in self.params.items():
            p.name = name

    @property
    def input_dim(self):
        return spectral.half_length(self.resize_h, self.resize_w)

    @property
    def latent_dim(self):
        return self.input_dim if self.bypass else self.d_latent

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True

    def state_dict(self, prefix=""):
        return {prefix + k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state, prefix=""):
        for k, p in self.params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigurationError(f"{prefix + k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def config(self):
        return {
            "resize_h": self.resize_h,
            "resize_w": self.resize_w,
            "d_latent": self.d_latent,
            "d_hidden": self.d_hidden,
        }


def half_spectrum(module, h):
    """Scaled half-spectrum amplitude vectors, (N, C, input_dim)."""
    h = as_tensor(h)
    if h.ndim != 4:
        raise ConfigurationError(f"expected (N, C, H, W) features, got {h.shape}")
    if not np.isfinite(h.data).all():
        raise ConfigurationError("non-finite values in AST input features")
    x = bilinear_resize(h, module.resize_h, module.resize_w)
    vec = spectral.vectorize_T(spectral.fft2(x).amplitude)
    return vec.values * (1.0 / module.amp_scale)


def encode(module, h):
    """Per-channel AST latents, shape (N, C, latent_dim).

    Degenerate (zero-norm) rows are passed through unnormalized and reported
    in ``flags['degenerate_rows']`` of the returned tensor.
    """
    v = half_spectrum(module, h)
    n, c, d = v.shape
    if module.bypass:
        return v
    p = module.params
    x = v.reshape(n * c, d)
    x = relu(linear(x, p["enc1/weight"], p["enc1/bias"]))
    x = linear(x, p["enc2/weight"], p["enc2/bias"])
    z = unit_normalize(x)
    out = z.reshape(n, c, module.d_latent)
    if "degenerate_rows" in z.flags:
        out.flags["degenerate_rows"] = z.flags["degenerate_rows"]
    return out


def decode(module, z):
    """Amplitude planes on the (resize_h, resize_w) grid, shape (N, C, rh, rw)."""
    z = as_tensor(z)
    if z.ndim != 3 or z.shape[2] != module.latent_dim:
        raise ConfigurationError(f"latent shape {z.shape} incompatible with width {module.latent_dim}")
    n, c, _ = z.shape
    if module.bypass:
        v = z
    else:
        p = module.params
        x = relu(linear(z.reshape(n * c, module.d_latent), p["dec1/weight"], p["dec1/bias"]))
        v = linear(x, p["dec2/weight"], p["dec2/bias"]).reshape(n, c, module.input_dim)
    amp = spectral.devectorize_Tinv(v * module.amp_scale, module.resize_h, module.resize_w)
    return amp


def apply(module, h, z, return_spectrum=False):
    """AST(h, z): decoded amplitude of ``z`` recombined with the phase of ``h``."""
    h, z = as_tensor(h), as_tensor(z)
    if h.ndim != 4:
        raise ConfigurationError(f"expected (N, C, H, W) features, got {h.shape}")
    if z.shape[:2] != h.shape[:2]:
        raise ConfigurationError(f"latent batch/channels {z.shape[:2]} != features {h.shape[:2]}")
    hh, ww = h.shape[2:]
    phase = spectral.fft2(h).phase
    amp = spectral.spectral_resize(decode(module, z), hh, ww)
    spec = spectral.recombine(amp, phase)
    out = spectral.ifft2(spec)
    return (out, spec) if return_spectrum else out


def autoencode(module, h):
    """AST^(ae)(h): the latent passes through unmodified."""
    return apply(module, h, encode(module, h))


def reconstruction_loss(module, h):
    return mse(as_tensor(h), autoencode(module, h))


def train_autoencoder(
    module,
    features,
    steps,
    lr,
    momentum=0.9,
    weight_decay=5e-4,
    power=0.9,
    stage="train_ast",
):
    """Minimize mse(h, AST^(ae)(h)) over θ_Q with SGD.

    ``features`` is a sequence of (N, C, H, W) arrays (cycled in order) or an
    iterator yielding them. Inputs are treated as constants. Returns the
    per-step loss history.
    """
    if module.frozen:
        raise InvariantError("cannot train a frozen AST module")
    if module.bypass:
        raise ConfigurationError("bypass modules have no parameters to train")
    source = itertools.cycle(features) if isinstance(features, (list, tuple)) else iter(features)
    opt = SGD(module.parameters(), lr, momentum, weight_decay)
    history = []
    for step in range(steps):
        h = np.asarray(next(source), dtype=np.float64)
        opt.zero_grad()
        loss = reconstruction_loss(module, Tensor(h))
        value = loss.item()
        cur_lr = poly_lr(lr, step, steps, power)
        if not np.isfinite(value):
            raise TrainingDivergence(stage, step, cur_lr, value)
        loss.backward()
        opt.step(cur_lr)
        history.append(value)
    return history


def compute_prototype(module, features, renormalize=True):
    """Mean per-channel latent over all samples of ``features``, (C, latent_dim).

    ``features`` yields (N, C, H, W) arrays. The mean is accumulated in one
    streaming pass; with ``renormalize`` each row is projected back onto the
    unit sphere (degenerate rows are flagged in ``flags['degenerate_rows']``).
    """
    total = None
    count = 0
    with no_grad():
        for h in features:
            z = encode(module, np.asarray(h, dtype=np.float64)).data
            total = z.sum(axis=0) if total is None else total + z.sum(axis=0)
            count += z.shape[0]
    if count == 0:
        raise ConfigurationError("prototype needs at least one feature map")
    mean = total / count
    if not renormalize:
        return Tensor(mean)
    out = unit_normalize(Tensor(mean))
    return out
