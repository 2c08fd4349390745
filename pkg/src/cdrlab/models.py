"""Trainable models built on the autodiff engine.

All parameters live in one shared :class:`ParamStore` under dotted prefixes
(``encoder.*``, ``forward.*``, ``gru.*``, ``similarity.*``) so a whole
experiment checkpoints as a single file.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot_uniform
from .config import ModelConfig


class ModelError(ValueError):
    pass


class Module:
    prefix = ""

    def __init__(self, params: ParamStore, prefix: str | None = None):
        self.params = params
        if prefix is not None:
            self.prefix = prefix

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def _add(self, name: str, value: np.ndarray) -> None:
        key = f"{self.prefix}.{name}"
        if key not in self.params:
            self.params.add(key, value)
        elif self.params[key].shape != value.shape:
            raise ModelError(f"parameter {key} has shape {self.params[key].shape}, expected {value.shape}")

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        self._add(f"{name}.w", glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
        self._add(f"{name}.b", np.zeros(fan_out))

    def linear(self, name: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self.p(f"{name}.w")) + self.p(f"{name}.b")

    def parameter_names(self) -> list[str]:
        return [k for k in self.params.names() if k.startswith(self.prefix + ".")]


def conv_out(n: int, k: int = 3, stride: int = 2) -> int:
    return (n - k) // stride + 1


class Encoder(Module):
    """Two stride-2 3x3 convolutions (relu) then two dense layers to the latent."""

    prefix = "encoder"

    def __init__(self, cfg: ModelConfig, resolution: int, params: ParamStore,
                 rng: np.random.Generator | None = None):
        super().__init__(params)
        self.resolution = resolution
        self.latent_dim = cfg.latent_dim
        c1, c2 = cfg.conv_channels
        side = conv_out(conv_out(resolution))
        self.flat = side * side * c2
        rng = rng or np.random.default_rng(0)
        self._add("conv1.w", glorot_uniform(rng, (3, 3, 3, c1), 27, 9 * c1))
        self._add("conv1.b", np.zeros(c1))
        self._add("conv2.w", glorot_uniform(rng, (3, 3, c1, c2), 9 * c1, 9 * c2))
        self._add("conv2.b", np.zeros(c2))
        self._linear(rng, "fc1", self.flat, cfg.encoder_hidden)
        self._linear(rng, "fc2", cfg.encoder_hidden, cfg.latent_dim)

    def __call__(self, images) -> Tensor:
        x = ad.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (self.resolution, self.resolution, 3):
            raise ModelError(
                f"encoder expects (B, {self.resolution}, {self.resolution}, 3) images, got {x.shape}"
            )
        x = x - 0.5  # center pixel values
        h = ad.relu(ad.conv2d(x, self.p("conv1.w"), stride=2) + self.p("conv1.b"))
        h = ad.relu(ad.conv2d(h, self.p("conv2.w"), stride=2) + self.p("conv2.b"))
        h = h.reshape(h.shape[0], self.flat)
        h = ad.relu(self.linear("fc1", h))
        return self.linear("fc2", h)


def encode(encoder: Encoder, observation: np.ndarray) -> np.ndarray:
    """Latent for a single H x W x 3 observation (or a batch)."""
    obs = np.asarray(observation)
    with ad.no_grad():
        z = encoder(obs).data
    return z[0] if obs.ndim == 3 else z


def encode_batched(encoder: Encoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(encoder(np.asarray(images[i:i + chunk], dtype=np.float64)).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.latent_dim))


class ForwardModel(Module):
    """One-step latent dynamics ``z_next = z + trunk(concat(z, action_code(a)))``.

    Actions are divided by ``action_scale`` (the maximum push force) before
    the tanh action encoder.
    """

    prefix = "forward"

    def __init__(self, cfg: ModelConfig, params: ParamStore, action_scale: float = 1.0,
                 rng: np.random.Generator | None = None):
        super().__init__(params)
        self.latent_dim = cfg.latent_dim
        self.action_scale = float(action_scale) if action_scale > 0 else 1.0
        rng = rng or np.random.default_rng(1)
        d = cfg.latent_dim
        self._linear(rng, "act1", 2, cfg.action_hidden)
        self._linear(rng, "act2", cfg.action_hidden, cfg.action_code)
        self._linear(rng, "trunk1", d + cfg.action_code, cfg.trunk_hidden)
        self._linear(rng, "trunk2", cfg.trunk_hidden, cfg.trunk_hidden)
        self._linear(rng, "trunk3", cfg.trunk_hidden, d)

    def action_code(self, actions) -> Tensor:
        a = ad.as_tensor(np.asarray(actions, dtype=np.float64).reshape(-1, 2) / self.action_scale)
        return self.linear("act2", ad.tanh(self.linear("act1", a)))

    def __call__(self, z, actions) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[1] != self.latent_dim:
            raise ModelError(f"forward model expects latent dim {self.latent_dim}, got {z.shape}")
        code = self.action_code(actions)
        if code.shape[0] != z.shape[0]:
            if z.shape[0] != 1:
                raise ModelError(f"{z.shape[0]} latents but {code.shape[0]} actions")
            z = ad.matmul(ad.as_tensor(np.ones((code.shape[0], 1))), z)
        h = ad.relu(self.linear("trunk1", ad.concat([z, code], axis=1)))
        h = ad.relu(self.linear("trunk2", h))
        return z + self.linear("trunk3", h)


def predict_next(model: ForwardModel, z, action) -> np.ndarray:
    force = action.force if hasattr(action, "force") else action
    with ad.no_grad():
        out = model(np.asarray(z, dtype=np.float64), np.asarray(force, dtype=np.float64)).data
    return out[0] if np.ndim(z) == 1 else out


class GRUPredictor(Module):
    """Single-layer GRU over latent sequences with one linear head per horizon."""

    prefix = "gru"

    def __init__(self, cfg: ModelConfig, params: ParamStore, rng: np.random.Generator | None = None):
        super().__init__(params)
        self.latent_dim = cfg.latent_dim
        self.hidden = cfg.gru_hidden
        self.horizons = cfg.horizons
        rng = rng or np.random.default_rng(2)
        d, hd = cfg.latent_dim, cfg.gru_hidden
        for gate in ("r", "z", "n"):
            self._add(f"w_i{gate}", glorot_uniform(rng, (d, hd), d, hd))
            self._add(f"w_h{gate}", glorot_uniform(rng, (hd, hd), hd, hd))
            self._add(f"b_i{gate}", np.zeros(hd))
            self._add(f"b_h{gate}", np.zeros(hd))
        for k in range(1, self.horizons + 1):
            self._add(f"head{k}", glorot_uniform(rng, (hd, d), hd, d))

    def cell(self, x: Tensor, h: Tensor) -> Tensor:
        p = self.p
        r = ad.sigmoid(x @ p("w_ir") + p("b_ir") + h @ p("w_hr") + p("b_hr"))
        u = ad.sigmoid(x @ p("w_iz") + p("b_iz") + h @ p("w_hz") + p("b_hz"))
        n = ad.tanh(x @ p("w_in") + p("b_in") + r * (h @ p("w_hn") + p("b_hn")))
        return (1.0 - u) * n + u * h

    def summarize(self, z_seq) -> Tensor:
        z_seq = ad.as_tensor(z_seq)
        if z_seq.ndim == 2:
            z_seq = z_seq.reshape((1,) + z_seq.shape)
        if z_seq.ndim != 3 or z_seq.shape[1] < 1:
            raise ModelError(f"GRU needs a non-empty (B, T, d) sequence, got {z_seq.shape}")
        if z_seq.shape[2] != self.latent_dim:
            raise ModelError(f"GRU expects latent dim {self.latent_dim}, got {z_seq.shape[2]}")
        h = ad.as_tensor(np.zeros((z_seq.shape[0], self.hidden)))
        for t in range(z_seq.shape[1]):
            h = self.cell(z_seq[:, t, :], h)
        return h

    def __call__(self, z_seq) -> list[Tensor]:
        h = self.summarize(z_seq)
        return [h @ self.p(f"head{k}") for k in range(1, self.horizons + 1)]


def predict_multistep(model: GRUPredictor, z_sequence) -> np.ndarray:
    """(K, d) predictions for one sequence, or (K, B, d) for a batch."""
    z = np.asarray(z_sequence, dtype=np.float64)
    if z.ndim == 2 and z.shape[0] == 0 or z.size == 0:
        raise ModelError("empty latent sequence")
    with ad.no_grad():
        preds = np.stack([p.data for p in model(z)])
    return preds[:, 0] if z.ndim == 2 else preds


class SeparableEncoder(Module):
    """``act(phi_x @ W_x + phi_e @ W_e + b)`` with fixed feature maps."""

    prefix = "separable"

    def __init__(self, x_dim: int, e_dim: int, out_dim: int, params: ParamStore,
                 activation: str = "identity", rng: np.random.Generator | None = None,
                 init_scale: float = 0.1):
        super().__init__(params)
        if activation not in ("identity", "tanh"):
            raise ModelError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = rng or np.random.default_rng(3)
        self._add("w_x", init_scale * rng.standard_normal((x_dim, out_dim)))
        self._add("w_e", init_scale * rng.standard_normal((e_dim, out_dim)))
        self._add("b", np.zeros(out_dim))

    def __call__(self, x_features, e_features, use_e: bool = True) -> Tensor:
        pre = ad.as_tensor(x_features) @ self.p("w_x") + self.p("b")
        if use_e:
            pre = pre + ad.as_tensor(e_features) @ self.p("w_e")
        return ad.tanh(pre) if self.activation == "tanh" else pre


def separable_forward(model: SeparableEncoder, x_features, e_features) -> np.ndarray:
    with ad.no_grad():
        return model(np.asarray(x_features, dtype=np.float64), np.asarray(e_features, dtype=np.float64)).data


def add_bilinear(params: ParamStore, latent_dim: int) -> Tensor:
    key = "similarity.w"
    if key not in params:
        params.add(key, np.eye(latent_dim))
    return params[key]
