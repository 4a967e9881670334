"""Toy dense-prediction CNN split into Φ (early), Ψ (middle) and a 1x1 head.

AST insertion sites sit after Φ (layer l) and after Ψ (layer l'). Block
outputs are numbered 1..5 across Φ and Ψ; with the default config l = 3
and l' = 5.
"""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from . import ast as astmod
from .errors import ConfigurationError
from .tensor import Tensor, as_tensor, bilinear_resize, conv2d, parameter, relu

MODES = ("plain", "ae", "sim", "norm", "sim_then_norm")


@dataclass
class SegmentorConfig:
    in_channels: int = 3
    num_classes: int = 5
    phi_widths: list = field(default_factory=lambda: [8, 16, 32])
    phi_strides: list = field(default_factory=lambda: [2, 2, 1])
    psi_widths: list = field(default_factory=lambda: [64, 96])
    kernel: int = 3

    def __post_init__(self):
        if len(self.phi_widths) != len(self.phi_strides):
            raise ConfigurationError("phi_widths and phi_strides must have equal length")
        if not self.phi_widths or not self.psi_widths:
            raise ConfigurationError("both Φ and Ψ need at least one block")
        if min(self.phi_widths + self.psi_widths) <= 0 or self.num_classes < 2:
            raise ConfigurationError("widths must be positive and num_classes >= 2")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel size must be odd")

    @property
    def layer_l(self):
        return len(self.phi_widths)

    @property
    def layer_lp(self):
        return len(self.phi_widths) + len(self.psi_widths)

    @property
    def num_blocks(self):
        return self.layer_lp

    def to_dict(self):
        return asdict(self)


class Segmentor:
    def __init__(self, config=None, seed=0):
        self.config = config or SegmentorConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        k = cfg.kernel
        self.params = {}
        self.blocks = []  # (prefix, stride)
        c_in = cfg.in_channels
        for part, widths, strides in (
            ("phi", cfg.phi_widths, cfg.phi_strides),
            ("psi", cfg.psi_widths, [1] * len(cfg.psi_widths)),
        ):
            for i, (c_out, s) in enumerate(zip(widths, strides)):
                name = f"{part}/conv{i + 1}"
                std = math.sqrt(2.0 / (c_in * k * k))
                self._add(f"{name}/weight", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
                self._add(f"{name}/bias", np.zeros(c_out))
                self.blocks.append((name, s))
                c_in = c_out
        std = math.sqrt(1.0 / c_in)
        self._add("head/weight", rng.normal(0.0, std, size=(cfg.num_classes, c_in, 1, 1)))
        self._add("head/bias", np.zeros(cfg.num_classes))

    def _add(self, name, arr):
        self.params[name] = parameter(arr, name)

    def parameters(self):
        return list(self.params.values())

    def state_dict(self, prefix=""):
        return {prefix + k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state, prefix=""):
        for k, p in self.params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigurationError(f"{prefix + k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def _block(self, i, x):
        name, stride = self.blocks[i]
        pad = self.config.kernel // 2
        return relu(conv2d(x, self.params[f"{name}/weight"], self.params[f"{name}/bias"], stride, pad))

    def forward_phi(self, x, collect=None):
        h = as_tensor(x)
        for i in range(self.config.layer_l):
            h = self._block(i, h)
            if collect is not None:
                collect.append(h)
        return h

    def forward_psi(self, h, collect=None):
        for i in range(self.config.layer_l, self.config.layer_lp):
            h = self._block(i, h)
            if collect is not None:
                collect.append(h)
        return h

    def forward_head(self, h, out_hw):
        logits = conv2d(h, self.params["head/weight"], self.params["head/bias"])
        return bilinear_resize(logits, out_hw[0], out_hw[1])

    def forward_full(self, x, mode="plain", ast_cs=None, ast_dn=None, partner=None, prototype=None):
        """Logits (N, K, H, W) of the composed network under ``mode``.

        Modes at (l, l'): plain (no AST), ae (ae, ae), sim (partner latent, ae),
        norm (ae, prototype), sim_then_norm (partner latent, prototype).
        ``partner`` is an (N, C_l, d) latent batch, ``prototype`` a (C_l', d)
        latent broadcast over the batch.
        """
        return self.run(x, mode, ast_cs, ast_dn, partner, prototype)["logits"]

    def run(self, x, mode="plain", ast_cs=None, ast_dn=None, partner=None, prototype=None):
        """Forward pass that also exposes intermediate features.

        Returns a dict with ``logits``, ``blocks`` (the 5 block outputs, taken
        after the AST at sites l and l' when one is active), ``h_l`` (raw Φ
        output) and ``h_lp`` (Ψ output before AST_dn).
        """
        x = as_tensor(x)
        blocks = []
        h_l = self.forward_phi(x, blocks)
        out = self.tail(h_l, x.shape[2:], mode, ast_cs, ast_dn, partner, prototype, blocks)
        out["h_l"] = h_l
        return out

    def tail(self, h_l, out_hw, mode="plain", ast_cs=None, ast_dn=None, partner=None, prototype=None, blocks=None):
        """Everything after Φ: AST_cs, Ψ, AST_dn and the head, from a given h_l."""
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != "plain" and (ast_cs is None or ast_dn is None):
            raise ConfigurationError(f"mode {mode!r} needs both AST modules")
        if mode in ("sim", "sim_then_norm") and partner is None:
            raise ConfigurationError(f"mode {mode!r} requires a partner latent")
        if mode in ("norm", "sim_then_norm") and prototype is None:
            raise ConfigurationError(f"mode {mode!r} requires the domain prototype")
        blocks = [] if blocks is None else blocks
        if mode == "plain":
            g = h_l
        elif mode in ("sim", "sim_then_norm"):
            g = astmod.apply(ast_cs, h_l, partner)
        else:
            g = astmod.autoencode(ast_cs, h_l)
        if blocks:
            blocks[-1] = g
        h_lp = self.forward_psi(g, blocks)
        if mode == "plain":
            out = h_lp
        elif mode in ("norm", "sim_then_norm"):
            proto = as_tensor(prototype)
            n = h_lp.shape[0]
            z = Tensor(np.broadcast_to(proto.data, (n,) + proto.shape).copy())
            out = astmod.apply(ast_dn, h_lp, z)
        else:
            out = astmod.autoencode(ast_dn, h_lp)
        if blocks:
            blocks[-1] = out
        logits = self.forward_head(out, out_hw)
        return {"logits": logits, "blocks": blocks, "h_lp": h_lp}
