"""Finite-difference gradient cases shared by the unit tests and the acceptance gate.

Each case builds random inputs and a function of Tensors; the scalar checked
is sum(output * R) for a fixed random projection R.
"""

import numpy as np

from astocda import ast as astmod
from astocda import spectral as S
from astocda import tensor as T
from astocda.tensor import Tensor

from oracles import numeric_grad

FD_STEP = 1e-6
REL_TOL = 1e-4
ABS_FLOOR = 1e-6
# entries far below the gradient's scale are compared against that scale; their
# central-difference roundoff (~eps*|f|/h) would otherwise dominate
SCALE_FLOOR = 1e-3


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _small_ast(rng):
    m = astmod.AstModule(resize_h=4, resize_w=8, d_latent=6, d_hidden=12, seed=int(rng.integers(1 << 31)))
    # a trained-looking decoder: strictly positive amplitudes keep the clamp away from its kink
    m.params["dec2/weight"].data = 0.05 * rng.normal(size=m.params["dec2/weight"].shape)
    m.params["dec2/bias"].data = 1.0 + 0.1 * rng.random(m.input_dim)
    return m


def _case_defs():
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn

        return deco

    @case("add")
    def _(rng):
        return [rng.normal(size=(3, 4)), rng.normal(size=(4,))], lambda a, b: a + b

    @case("mul")
    def _(rng):
        return [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))], lambda a, b: a * b

    @case("sub_neg_div")
    def _(rng):
        return [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], lambda a, b: (-(a - b)) / 3.0

    @case("sum_mean")
    def _(rng):
        return [rng.normal(size=(2, 3, 4))], lambda a: T.tsum(a, axis=1) * T.tmean(a, axis=1)

    @case("reshape_transpose")
    def _(rng):
        return [rng.normal(size=(2, 3, 4))], lambda a: a.reshape(6, 4).transpose(1, 0) * 2.0

    @case("getitem")
    def _(rng):
        idx = np.array([0, 2, 2, 1])
        return [rng.normal(size=(3, 5))], lambda a: T.concat([a[1:, ::2], a[idx][:2, 1:4]], axis=0)

    @case("stack")
    def _(rng):
        return [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], lambda a, b: T.stack([a, b * b], axis=1)

    @case("clamp_min")
    def _(rng):
        return [_away_from_zero(rng, (4, 5))], lambda a: T.clamp_min(a, 0.0)

    @case("conv2d")
    def _(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        arrs = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))]
        return arrs, lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad)

    @case("linear")
    def _(rng):
        arrs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))]
        return arrs, T.linear

    @case("relu")
    def _(rng):
        return [_away_from_zero(rng, (3, 4))], T.relu

    @case("leaky_relu")
    def _(rng):
        return [_away_from_zero(rng, (3, 4))], lambda a: T.leaky_relu(a, 0.2)

    @case("softmax_cross_entropy")
    def _(rng):
        labels = rng.integers(0, 3, size=(2, 2, 3))
        labels[0, 0, 0] = 255
        return [rng.normal(size=(2, 3, 2, 3))], lambda a: T.softmax_cross_entropy(a, labels)

    @case("mse")
    def _(rng):
        return [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], T.mse

    @case("bilinear_resize")
    def _(rng):
        oh, ow = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        return [rng.normal(size=(1, 2, 4, 6))], lambda a: T.bilinear_resize(a, oh, ow)

    @case("unit_normalize")
    def _(rng):
        return [rng.normal(size=(3, 5))], T.unit_normalize

    @case("fft2_amplitude")
    def _(rng):
        return [rng.normal(size=(2, 4, 8))], lambda a: S.fft2(a).amplitude

    @case("fft2_phase")
    def _(rng):
        return [rng.normal(size=(2, 4, 8))], lambda a: S.fft2(a).phase

    @case("ifft2_recombine_amplitude")
    def _(rng):
        x, y = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        amp = S.fft2(Tensor(x)).amplitude.data
        phase = S.fft2(Tensor(y)).phase.data
        # gradient w.r.t. a full plane, symmetrized through T^-1 so the perturbation stays admissible
        vec = S.vectorize_T(Tensor(amp)).values.data
        return [vec], lambda v: S.ifft2(S.recombine(S.devectorize_Tinv(v, 8, 8), Tensor(phase)))

    @case("ifft2_recombine_plane")
    def _(rng):
        return [rng.normal(size=(8, 4))], lambda a: S.ifft2(
            S.recombine(S.fft2(a).amplitude * 1.5, S.fft2(a).phase)
        )

    @case("spectral_resize")
    def _(rng):
        oh, ow = [int(v) for v in rng.choice([2, 4, 8, 16], size=2)]
        return [rng.normal(size=(1, 8, 4))], lambda a: S.spectral_resize(a, oh, ow)

    @case("ast_apply_features")
    def _(rng):
        m = _small_ast(rng)
        z = astmod.encode(m, rng.normal(size=(1, 2, 8, 8))).data
        return [rng.normal(size=(1, 2, 8, 8))], lambda h: astmod.apply(m, h, Tensor(z))

    @case("ast_autoencode_features")
    def _(rng):
        m = _small_ast(rng)
        return [rng.normal(size=(1, 2, 8, 8))], lambda h: astmod.autoencode(m, h)

    @case("ast_apply_latent")
    def _(rng):
        m = _small_ast(rng)
        h = rng.normal(size=(1, 2, 8, 16))
        return [rng.normal(size=(1, 2, m.d_latent))], lambda z: astmod.apply(m, Tensor(h), z)

    return cases


CASES = _case_defs()


def check_case(name, seed):
    """Max elementwise relative error between tape and central-difference gradients."""
    rng = np.random.default_rng(seed)
    arrays, fn = CASES[name](rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = fn(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=out.shape)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = T.tsum(fn(*leaves) * proj)
    loss.backward()

    worst = 0.0
    for k, a in enumerate(arrays):

        def f():
            return float(np.sum(fn(*[Tensor(b) for b in arrays]).data * proj))

        num = numeric_grad(f, arrays[k], FD_STEP)
        ana = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(num)
        floor = max(ABS_FLOOR, SCALE_FLOOR * float(np.abs(num).max(initial=0.0)))
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(err.max()))
    return worst


def run_suite(instances=20, names=None):
    """{case: worst relative error over ``instances`` random draws}."""
    names = list(CASES) if names is None else names
    return {n: max(check_case(n, 1000 * i + j) for j in range(instances)) for i, n in enumerate(names)}
