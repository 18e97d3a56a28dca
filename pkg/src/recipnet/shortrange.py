"""Invariant message passing over the periodic radius graph.

Per edge: concatenate source node, destination node, and edge features,
run two independent MLPs (a sigmoid gate and a message), aggregate gated
messages per source node, and apply a residual update with batch norm.
Geometry enters only through edge distances, so the layer is invariant to
rigid motions of the Cartesian frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .errors import ShapeError


def _mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ad.linear(ad.silu(ad.linear(x, w1, b1)), w2, b2)


@dataclass
class LocalLayerParams:
    """Weights and batch-norm state for one message-passing layer."""

    gate_w1: Parameter
    gate_b1: Parameter
    gate_w2: Parameter
    gate_b2: Parameter
    msg_w1: Parameter
    msg_b1: Parameter
    msg_w2: Parameter
    msg_b2: Parameter
    bn_gate_gamma: Parameter
    bn_gate_beta: Parameter
    bn_out_gamma: Parameter
    bn_out_beta: Parameter
    bn_gate: BatchNormState
    bn_out: BatchNormState
    aggregation: str = "sum"

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, prefix: str,
             aggregation: str = "sum", dtype=np.float64) -> "LocalLayerParams":
        def lin(fan_in, fan_out, name):
            bound = 1.0 / np.sqrt(fan_in)
            w = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype),
                             f"{prefix}.{name}.weight")
            b = ad.parameter(rng.uniform(-bound, bound, size=fan_out).astype(dtype),
                             f"{prefix}.{name}.bias")
            return w, b

        gate_w1, gate_b1 = lin(3 * width, width, "gate.0")
        gate_w2, gate_b2 = lin(width, width, "gate.1")
        msg_w1, msg_b1 = lin(3 * width, width, "msg.0")
        msg_w2, msg_b2 = lin(width, width, "msg.1")
        return cls(
            gate_w1=gate_w1, gate_b1=gate_b1, gate_w2=gate_w2, gate_b2=gate_b2,
            msg_w1=msg_w1, msg_b1=msg_b1, msg_w2=msg_w2, msg_b2=msg_b2,
            bn_gate_gamma=ad.parameter(np.ones(width, dtype=dtype), f"{prefix}.bn_gate.gamma"),
            bn_gate_beta=ad.parameter(np.zeros(width, dtype=dtype), f"{prefix}.bn_gate.beta"),
            bn_out_gamma=ad.parameter(np.ones(width, dtype=dtype), f"{prefix}.bn_out.gamma"),
            bn_out_beta=ad.parameter(np.zeros(width, dtype=dtype), f"{prefix}.bn_out.beta"),
            bn_gate=BatchNormState.create(width),
            bn_out=BatchNormState.create(width),
            aggregation=aggregation,
        )

    def parameters(self) -> List[Parameter]:
        return [
            self.gate_w1, self.gate_b1, self.gate_w2, self.gate_b2,
            self.msg_w1, self.msg_b1, self.msg_w2, self.msg_b2,
            self.bn_gate_gamma, self.bn_gate_beta,
            self.bn_out_gamma, self.bn_out_beta,
        ]

    def bn_states(self):
        return {"bn_gate": self.bn_gate, "bn_out": self.bn_out}


def local_layer(
    h: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    v_e: Tensor,
    params: LocalLayerParams,
    training: bool,
) -> Tensor:
    """One message-passing update; aggregation runs over edges keyed by src.

    A node with no incident edges receives a zero aggregate and passes
    through the residual branch unchanged (up to batch norm and relu).
    """
    if h.data.ndim != 2 or v_e.data.ndim != 2 or h.shape[1] != v_e.shape[1]:
        raise ShapeError(f"node/edge widths differ: {h.shape} vs {v_e.shape}")
    if len(src) != v_e.shape[0]:
        raise ShapeError(f"{len(src)} edges but {v_e.shape[0]} edge feature rows")
    num_nodes = h.shape[0]

    if len(src) == 0:
        agg = Tensor(np.zeros_like(h.data))
    else:
        z = ad.concat([ad.gather_rows(h, src), ad.gather_rows(h, dst), v_e], axis=-1)
        gate_logits = ad.batch_norm(
            _mlp2(z, params.gate_w1.value, params.gate_b1.value,
                  params.gate_w2.value, params.gate_b2.value),
            params.bn_gate_gamma.value, params.bn_gate_beta.value, params.bn_gate, training,
        )
        gate = ad.sigmoid(gate_logits)
        message = ad.mul(
            gate,
            _mlp2(z, params.msg_w1.value, params.msg_b1.value,
                  params.msg_w2.value, params.msg_b2.value),
        )
        if params.aggregation == "mean":
            agg = ad.segment_mean(message, src, num_nodes)
        else:
            agg = ad.segment_sum(message, src, num_nodes)
    agg = ad.batch_norm(
        agg, params.bn_out_gamma.value, params.bn_out_beta.value, params.bn_out, training
    )
    return ad.relu(ad.add(h, agg))
