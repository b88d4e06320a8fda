"""Low-rank adapters and the timestep-routed expert bank.

Every expert shares one frozen backbone. An expert owns, for each linear
layer, a low-rank pair ``(A, B)`` with effective weight
``W0 + (alpha / r) * B @ A``, together with private copies of every bias and
normalization gain/shift. ``rank=None`` gives a dense weight delta instead,
which is how fully fine-tuned experts are represented.
"""
from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from . import tensor as tn
from .networks import MLP
from .schedule import expert_for_timestep, expert_range
from .tensor import Tensor


class AdapterStateError(RuntimeError):
    """Merge/unmerge called in the wrong state, or a forward that conflicts with a merged adapter."""


class LoraAdapter:
    """Trainable parameter set for one expert.

    Parameters
    ----------
    backbone : MLP
        Network whose layers are adapted. Only shapes and the bias/norm
        values (copied for the expert) are read.
    rank : int or None
        Low-rank width ``r``. ``0`` tunes only biases and normalization;
        ``None`` makes a dense zero-initialised weight delta per layer.
    alpha : float
        Scale numerator; the update is scaled by ``alpha / rank``.
    """

    def __init__(self, backbone: MLP, rank: Optional[int] = 4, alpha: float = 8.0,
                 rng: Optional[np.random.Generator] = None, init_std: float = 0.02):
        if rank is not None and rank < 0:
            raise ValueError("rank must be >= 0 or None")
        rng = np.random.default_rng(0) if rng is None else rng
        self.rank = rank
        self.alpha = float(alpha)
        self.params: Dict[str, Tensor] = {}
        for name in backbone.weight_names():
            d, k = backbone.params[name].shape
            layer = name[: -len(".weight")]
            if rank is None:
                self.params[f"{layer}.delta"] = Tensor(np.zeros((d, k)))
            elif rank > 0:
                self.params[f"{layer}.lora_A"] = Tensor(rng.normal(0.0, init_std, (rank, k)))
                self.params[f"{layer}.lora_B"] = Tensor(np.zeros((d, rank)))
        for name in backbone.vector_names():
            self.params[name] = Tensor(backbone.params[name].data.copy())

    @property
    def scale(self) -> float:
        return 1.0 if not self.rank else self.alpha / self.rank

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def weight_update(self, layer: str):
        """The additive weight update for ``layer`` as a Tensor, or None."""
        if self.rank is None:
            return self.params[f"{layer}.delta"]
        if self.rank == 0:
            return None
        ba = tn.matmul(self.params[f"{layer}.lora_B"], self.params[f"{layer}.lora_A"])
        return tn.affine(ba, self.scale)

    def effective_params(self, backbone: MLP) -> Dict[str, Tensor]:
        out = {}
        for name, p in backbone.params.items():
            if name.endswith(".weight"):
                delta = self.weight_update(name[: -len(".weight")])
                out[name] = p if delta is None else tn.add(p, delta)
            else:
                out[name] = self.params[name]
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.asarray(state[k], dtype=np.float64).reshape(v.shape).copy()


class ExpertBank:
    """Frozen backbone plus ``N`` adapters routed by timestep.

    Expert ``n`` (1-based) owns ``expert_range(N, T, n)``. At most one
    adapter is merged into the backbone at a time; :meth:`unmerge` restores
    the original tensors bit-exactly.
    """

    def __init__(self, backbone: MLP, n_experts: int = 5, T: int = 1000, rank: Optional[int] = 4,
                 alpha: float = 8.0, seed: int = 0):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        expert_range(n_experts, T, 1)
        self.backbone = backbone
        self.backbone.requires_grad_(False)
        self.n_experts = int(n_experts)
        self.T = int(T)
        self.rank = rank
        self.alpha = float(alpha)
        rng = np.random.default_rng(seed)
        self.adapters = [LoraAdapter(backbone, rank, alpha, rng) for _ in range(n_experts)]
        self.merged: Optional[int] = None
        self._saved: Optional[Dict[str, np.ndarray]] = None
        self.evaluations = 0

    @property
    def spec(self):
        return self.backbone.spec

    def expert_for(self, t: int) -> int:
        return expert_for_timestep(self.n_experts, self.T, int(t))

    def adapter(self, n: int) -> LoraAdapter:
        if not 1 <= n <= self.n_experts:
            raise ValueError(f"expert index {n} outside [1, {self.n_experts}]")
        return self.adapters[n - 1]

    def forward(self, x, n: Optional[int] = None, t=None) -> Tensor:
        """Guidance-network output for expert ``n``; ``n=None`` is the bare backbone.

        ``t`` is only consumed by timestep-conditioned backbones.
        """
        self.evaluations += 1
        if self.merged is not None:
            if n != self.merged:
                raise AdapterStateError(
                    f"expert {self.merged} is merged; cannot evaluate {'the backbone' if n is None else n}"
                )
            return self.backbone.forward(x, t)
        if n is None:
            return self.backbone.forward(x, t)
        adapter = self.adapter(n)
        return self.backbone.forward(x, t, params=adapter.effective_params(self.backbone))

    __call__ = forward

    def merge(self, n: int) -> None:
        """Fold expert ``n`` into the backbone tensors in place."""
        if self.merged is not None:
            raise AdapterStateError(f"expert {self.merged} is already merged")
        adapter = self.adapter(n)
        self._saved = self.backbone.state_dict()
        with tn.no_grad():
            for name, p in self.backbone.params.items():
                if name.endswith(".weight"):
                    delta = adapter.weight_update(name[: -len(".weight")])
                    if delta is not None:
                        p.data = p.data + delta.data
                else:
                    p.data = adapter.params[name].data.copy()
        self.merged = n

    def unmerge(self) -> None:
        if self.merged is None:
            raise AdapterStateError("no expert is merged")
        for name, p in self.backbone.params.items():
            p.data = self._saved[name]
        self._saved = None
        self.merged = None

    def trainable_parameters(self, n: int) -> List[Tensor]:
        return self.adapter(n).parameters()

    def parameter_count(self) -> tuple:
        """``(per_expert, backbone)`` parameter counts."""
        return self.adapters[0].n_parameters(), self.backbone.n_parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        if self.merged is not None:
            raise AdapterStateError("unmerge before saving")
        state = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        for i, adapter in enumerate(self.adapters, start=1):
            state.update({f"expert{i}.{k}": v for k, v in adapter.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.backbone.load_state_dict({k[len("backbone."):]: v for k, v in state.items()
                                       if k.startswith("backbone.")})
        for i, adapter in enumerate(self.adapters, start=1):
            prefix = f"expert{i}."
            adapter.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
