"""MLP backbones, sinusoidal timestep embeddings and the epsilon predictor."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import tensor as tn
from .tensor import Tensor

NONLINEARITIES = ("relu", "tanh")


def time_embedding(t, dim: int, T: Optional[int] = None) -> np.ndarray:
    """Interleaved ``[sin(t w_j), cos(t w_j)]`` with ``w_j = 10000^(-2j/dim)``.

    A scalar ``t`` gives a ``(dim,)`` vector, an array of timesteps a
    ``(len(t), dim)`` matrix.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if T is not None and (np.any(t_arr < 0) or np.any(t_arr > T)):
        raise ValueError(f"timestep outside [0, {T}]")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t_arr[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1
    nonlinearity: str = "relu"
    time_embed_dim: int = 0
    norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be 0 or a positive even integer")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")

    @property
    def layer_dims(self) -> list:
        dims = [self.input_dim + self.time_embed_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


class MLP:
    """Linear -> affine norm -> nonlinearity stack with a linear head.

    Weights are stored as ``(out, in)``. Parameters live in an ordered dict
    of named :class:`Tensor` objects so they can be checkpointed, frozen, or
    swapped per expert. The affine norm stands in for batch normalization:
    a parameter-free layer norm followed by a trainable gain and shift.
    """

    def __init__(self, spec: MlpSpec, rng: Optional[np.random.Generator] = None):
        self.spec = spec
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: Dict[str, Tensor] = {}
        n_layers = len(spec.layer_dims)
        for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
            std = np.sqrt(2.0 / fan_in) if i < n_layers - 1 else np.sqrt(1.0 / fan_in)
            self.params[f"linear{i}.weight"] = Tensor(rng.normal(0.0, std, (fan_out, fan_in)))
            self.params[f"linear{i}.bias"] = Tensor(np.zeros(fan_out))
            if spec.norm and i < n_layers - 1:
                self.params[f"norm{i}.gain"] = Tensor(np.ones(fan_out))
                self.params[f"norm{i}.shift"] = Tensor(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_dims)

    def weight_names(self) -> list:
        return [f"linear{i}.weight" for i in range(self.n_layers)]

    def vector_names(self) -> list:
        """Biases and normalization gains/shifts, in parameter order."""
        return [k for k in self.params if not k.endswith(".weight")]

    def parameters(self) -> list:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "MLP":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _input(self, x, t) -> Tensor:
        x = tn.as_tensor(x)
        if self.spec.time_embed_dim == 0:
            return x
        if t is None:
            raise ValueError("this network is timestep-conditioned; pass t")
        emb = time_embedding(t, self.spec.time_embed_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, x.shape[:-1] + emb.shape)
        return tn.concat([x, Tensor(emb)])

    def forward(self, x, t=None, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Evaluate with the stored parameters, or with the mapping ``params``."""
        p = self.params if params is None else params
        act = tn.relu if self.spec.nonlinearity == "relu" else tn.tanh
        h = self._input(x, t)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = tn.linear(h, p[f"linear{i}.weight"], p[f"linear{i}.bias"])
            if i == last:
                break
            if self.spec.norm:
                h = tn.layer_norm(h) * p[f"norm{i}.gain"] + p[f"norm{i}.shift"]
            h = act(h)
        return h

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {v.shape}")
            v.data = arr.copy()

    def clone(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.spec = self.spec
        other.params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return other

    def with_time_embedding(self, dim: int) -> "MLP":
        """Copy of this network that also reads a timestep embedding.

        The extra input columns of the first layer start at zero, so the copy
        computes exactly the same function until it is trained.
        """
        spec = MlpSpec(**{**self.spec.to_dict(), "time_embed_dim": dim})
        other = self.clone()
        other.spec = spec
        w = other.params["linear0.weight"].data
        other.params["linear0.weight"] = Tensor(np.concatenate([w, np.zeros((w.shape[0], dim))], axis=1))
        return other


@dataclass
class EpsilonModel:
    """Noise predictor eps(x_t, t); a time-conditioned MLP with output_dim == input_dim."""

    spec: MlpSpec
    net: MLP = field(repr=False, default=None)

    def __post_init__(self):
        if self.spec.output_dim != self.spec.input_dim:
            raise ValueError("an epsilon model must predict noise of the input's shape")
        if self.spec.time_embed_dim == 0:
            raise ValueError("an epsilon model must be timestep-conditioned")
        if self.net is None:
            self.net = MLP(self.spec)

    @classmethod
    def create(cls, dim: int, hidden_dims=(128, 128, 128), time_embed_dim: int = 32,
               seed: int = 0) -> "EpsilonModel":
        spec = MlpSpec(dim, hidden_dims, dim, time_embed_dim=time_embed_dim, norm=False)
        return cls(spec, MLP(spec, np.random.default_rng(seed)))

    def forward(self, x, t) -> Tensor:
        return self.net.forward(x, t)

    def predict_eps(self, x: np.ndarray, t) -> np.ndarray:
        """Plain-array prediction, never recorded on a tape."""
        with tn.no_grad():
            return self.net.forward(Tensor(x), t).data

    def parameters(self) -> list:
        return self.net.parameters()
