"""Learnable weights of the whole model, keyed by dotted names."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .tensor import Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)  # name -> Tensor

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def count(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype):
        """Copy with every tensor cast to ``dtype`` (used for float64 checks)."""
        return ModelParams(self.config, {k: Tensor(v.data.astype(dtype), True, dtype) for k, v in self.tensors.items()})

    def state(self):
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.tensors[k].data = np.array(v, dtype=self.tensors[k].dtype, order="C")


def _glorot(rng, fan_in, fan_out, shape):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _he(rng, fan_in, shape):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def block_param_shapes(d: int, hidden: int):
    return {
        "q.w": (d, d), "q.b": (d,),
        "k.w": (d, d), "k.b": (d,),
        "v.w": (d, d), "v.b": (d,),
        "o.w": (d, d), "o.b": (d,),
        "mlp.fc1.w": (2 * d, hidden), "mlp.fc1.b": (hidden,),
        "mlp.fc2.w": (hidden, d), "mlp.fc2.b": (d,),
        "ln.g": (d,), "ln.b": (d,),
    }


def mlp_param_shapes(d_in: int, hidden: int, d_out: int):
    return {"fc1.w": (d_in, hidden), "fc1.b": (hidden,), "fc2.w": (hidden, d_out), "fc2.b": (d_out,)}


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape table for a configuration."""
    shapes = {}
    d = cfg.d_model
    if cfg.modality == "images":
        c_in = 1
        for i, c_out in enumerate(cfg.channels):
            shapes[f"enc.conv{i}.w"] = (c_out, c_in, 3, 3)
            shapes[f"enc.conv{i}.b"] = (c_out,)
            c_in = c_out
    else:
        for k, s in mlp_param_shapes(2, cfg.point_hidden, d).items():
            shapes[f"enc.pt.{k}"] = s
    for r in range(cfg.rounds):
        for kind in ("self", "cross"):
            for k, s in block_param_shapes(d, cfg.block_hidden).items():
                shapes[f"stack.r{r}.{kind}.{k}"] = s
    for head in ("f", "g"):
        for k, s in mlp_param_shapes(d, cfg.agg_hidden, cfg.agg_dim).items():
            shapes[f"agg.{head}.{k}"] = s
    for k, s in mlp_param_shapes(cfg.agg_dim, cfg.agg_hidden, 1).items():
        shapes[f"agg.h.{k}"] = s
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("enc.conv") and leaf == "w":
            arr = _he(rng, shape[1] * 9, shape)
        elif name.endswith("ln.g"):
            arr = np.ones(shape)
        elif leaf in ("b",):
            arr = np.zeros(shape)
        elif leaf == "w":
            if ".fc1." in name or name.startswith("enc.pt"):
                arr = _he(rng, shape[0], shape)
            else:
                arr = _glorot(rng, shape[0], shape[1], shape)
        else:
            arr = np.zeros(shape)
        out[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    return ModelParams(cfg, out)
