import numpy as np
import pytest

from cdrlab import autodiff as ad
from cdrlab.autodiff import ParamStore, grad_check
from cdrlab.config import ModelConfig
from cdrlab.models import (
    Encoder,
    ForwardModel,
    GRUPredictor,
    ModelError,
    SeparableEncoder,
    encode,
    predict_multistep,
    predict_next,
    separable_forward,
)
from cdrlab.worldsim import ActionPush

CFG = ModelConfig()


def test_encoder_output_shape_and_determinism(rng):
    enc = Encoder(CFG, 32, ParamStore(), rng)
    img = rng.uniform(size=(32, 32, 3))
    z = encode(enc, img)
    assert z.shape == (8,)
    assert encode(enc, img).tobytes() == z.tobytes()
    assert encode(enc, np.stack([img, img])).shape == (2, 8)


def test_encoder_rejects_wrong_resolution(rng):
    enc = Encoder(CFG, 32, ParamStore(), rng)
    with pytest.raises(ModelError, match="32"):
        encode(enc, np.zeros((16, 16, 3)))


def test_encoder_gradcheck(rng):
    ps = ParamStore()
    enc = Encoder(CFG, 16, ps, rng)
    x = rng.uniform(size=(3, 16, 16, 3))
    r = rng.normal(size=(3, 8))
    assert grad_check(lambda: (enc(x) * r).sum(), ps, max_coords=300, rng=rng) <= 1e-4


def test_forward_model_skip_identity(rng):
    ps = ParamStore()
    fwd = ForwardModel(CFG, ps, 100.0, rng)
    for name in ("trunk1", "trunk2", "trunk3"):
        for part in ("w", "b"):
            ps[f"forward.{name}.{part}"].data[...] = 0.0
    z = rng.normal(size=8)
    out = predict_next(fwd, z, ActionPush((30.0, -12.0)))
    assert out.tobytes() == z.tobytes()


def test_forward_model_batched_and_gradcheck(rng):
    ps = ParamStore()
    fwd = ForwardModel(CFG, ps, 100.0, rng)
    z = rng.normal(size=(4, 8))
    a = rng.uniform(-100, 100, size=(4, 2))
    assert predict_next(fwd, z, a).shape == (4, 8)
    assert predict_next(fwd, z[0], a[0]).tobytes() == predict_next(fwd, z[0], a[0]).tobytes()
    r = rng.normal(size=(4, 8))
    assert grad_check(lambda: (fwd(z, a) * r).sum(), ps, max_coords=300, rng=rng) <= 1e-4


def test_gru_outputs_k_heads_and_zero_weights(rng):
    ps = ParamStore()
    gru = GRUPredictor(CFG, ps, rng)
    seq = rng.normal(size=(5, 8))
    out = predict_multistep(gru, seq)
    assert out.shape == (6, 8)
    for k in ps.names():
        ps[k].data[...] = 0.0
    assert np.all(predict_multistep(gru, seq) == 0.0)
    with pytest.raises(ModelError):
        predict_multistep(gru, np.zeros((0, 8)))


def test_gru_gradcheck_through_five_steps(rng):
    ps = ParamStore()
    gru = GRUPredictor(CFG, ps, rng)
    for k in ps.names():
        if "b_" in k:
            ps[k].data[...] = rng.normal(0, 0.3, size=ps[k].shape)
    seq = rng.normal(size=(3, 5, 8))
    rs = [rng.normal(size=(3, 8)) for _ in range(6)]

    def loss():
        outs = gru(seq)
        total = outs[0] * rs[0]
        for o, r in zip(outs[1:], rs[1:]):
            total = total + o * r
        return total.sum()

    assert grad_check(loss, ps, max_coords=300, rng=rng) <= 1e-4


def test_gru_matches_reference_cell(rng):
    ps = ParamStore()
    gru = GRUPredictor(CFG, ps, rng)
    for k in ps.names():
        if "b_" in k:
            ps[k].data[...] = rng.normal(0, 0.3, size=ps[k].shape)
    v = {k.split(".", 1)[1]: t.data for k, t in ps.items()}
    sig = lambda a: 1 / (1 + np.exp(-a))
    seq = rng.normal(size=(4, 8))
    h = np.zeros(32)
    for x in seq:
        r = sig(x @ v["w_ir"] + v["b_ir"] + h @ v["w_hr"] + v["b_hr"])
        u = sig(x @ v["w_iz"] + v["b_iz"] + h @ v["w_hz"] + v["b_hz"])
        n = np.tanh(x @ v["w_in"] + v["b_in"] + r * (h @ v["w_hn"] + v["b_hn"]))
        h = (1 - u) * n + u * h
    ref = np.stack([h @ v[f"head{k}"] for k in range(1, 7)])
    np.testing.assert_allclose(predict_multistep(gru, seq), ref, atol=1e-12)


def test_separable_encoder_formula(rng):
    ps = ParamStore()
    sep = SeparableEncoder(5, 3, 4, ps, "tanh", rng)
    ps["separable.b"].data[...] = rng.normal(size=4)
    fx, fe = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    wx, we, b = (ps[f"separable.{k}"].data for k in ("w_x", "w_e", "b"))
    np.testing.assert_allclose(separable_forward(sep, fx, fe), np.tanh(fx @ wx + fe @ we + b), atol=1e-12)


def test_separable_encoder_zero_we_and_identity(rng):
    ps = ParamStore()
    sep = SeparableEncoder(4, 3, 4, ps, "identity", rng)
    ps["separable.w_e"].data[...] = 0.0
    fx = rng.normal(size=(5, 4))
    a = separable_forward(sep, fx, rng.normal(size=(5, 3)))
    b = separable_forward(sep, fx, rng.normal(size=(5, 3)))
    assert a.tobytes() == b.tobytes()
    ps["separable.w_x"].data[...] = np.eye(4)
    np.testing.assert_array_equal(separable_forward(sep, fx, np.zeros((5, 3))), fx)
