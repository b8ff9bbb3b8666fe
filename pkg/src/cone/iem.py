"""Illumination estimation: a tiny enhancement net plus a training-only
self-calibrated net, unrolled over a few weight-shared stages.

Enhancement net: four 3->3 conv+ReLU blocks with a skip from its input, then
a channel mean and clamp to ``[T_MIN, 1]``. This is the only network run at
inference time.

Self-calibrated net: 3->16 block, six 16->16 blocks, 16->3 output conv.
Every block but the last is conv+batchnorm+ReLU; three residual skips wrap
the middle-block pairs (2, 3), (4, 5) and (6, 7).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .cem import T_MIN
from .ndgrad import BatchNormState, NumericError, Tensor

ENH_BLOCKS = 4
SELFCAL_WIDTH = 16
SELFCAL_MIDDLE = 6
# zero-based indices into SelfCalWeights.convs; each pair is wrapped by a skip
SELFCAL_SKIPS = ((1, 2), (3, 4), (5, 6))


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class NormBlock(ConvBlock):
    gamma: Tensor = None
    beta: Tensor = None
    state: BatchNormState = None

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class EnhNetWeights:
    blocks: list[ConvBlock]

    def tensors(self) -> list[Tensor]:
        return [p for blk in self.blocks for p in blk.tensors()]

    def num_params(self) -> int:
        return sum(p.size for p in self.tensors())


@dataclass
class SelfCalWeights:
    blocks: list[NormBlock]
    output: ConvBlock

    def tensors(self) -> list[Tensor]:
        return [p for blk in self.blocks for p in blk.tensors()] + self.output.tensors()

    def num_params(self) -> int:
        return sum(p.size for p in self.tensors())


@dataclass
class StageTrace:
    inputs: list[Tensor] = field(default_factory=list)
    illumination: list[Tensor] = field(default_factory=list)
    enhanced: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.illumination)

    @property
    def final_illumination(self) -> Tensor:
        return self.illumination[-1]


def _conv_block(rng: np.random.Generator, c_in: int, c_out: int) -> ConvBlock:
    bound = np.sqrt(1.0 / (c_in * 9))
    w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)).astype(np.float32)
    return ConvBlock(Tensor(w, requires_grad=True),
                     Tensor(np.zeros(c_out, np.float32), requires_grad=True))


def _norm_block(rng: np.random.Generator, c_in: int, c_out: int) -> NormBlock:
    conv = _conv_block(rng, c_in, c_out)
    return NormBlock(conv.weight, conv.bias,
                     gamma=Tensor(np.ones(c_out, np.float32), requires_grad=True),
                     beta=Tensor(np.zeros(c_out, np.float32), requires_grad=True),
                     state=BatchNormState(c_out))


def init_weights(seed: int | np.random.Generator) -> tuple[EnhNetWeights, SelfCalWeights]:
    """Fan-in uniform kernels, zero biases, unit gamma, zero beta."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    enh = EnhNetWeights([_conv_block(rng, 3, 3) for _ in range(ENH_BLOCKS)])
    blocks = [_norm_block(rng, 3, SELFCAL_WIDTH)]
    blocks += [_norm_block(rng, SELFCAL_WIDTH, SELFCAL_WIDTH) for _ in range(SELFCAL_MIDDLE)]
    sc = SelfCalWeights(blocks, _conv_block(rng, SELFCAL_WIDTH, 3))
    return enh, sc


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations in {where}")


def enhancement_forward(v: Tensor, w: EnhNetWeights) -> Tensor:
    h = v
    for blk in w.blocks:
        h = nd.relu(nd.conv3x3(h, blk.weight, blk.bias))
    raw = nd.add(v, h)
    _check_finite(raw, "enhancement net")
    return nd.clamp(nd.mean(raw, axis=0, keepdims=True), T_MIN, 1.0)


def selfcal_forward(z: Tensor, w: SelfCalWeights, mode: str = "train") -> Tensor:
    def block(h, blk):
        h = nd.conv3x3(h, blk.weight, blk.bias)
        return nd.relu(nd.batchnorm(h, blk.gamma, blk.beta, blk.state, mode))

    h = block(z, w.blocks[0])
    skip_from = {first: last for first, last in SELFCAL_SKIPS}
    i = 1
    while i < len(w.blocks):
        if i in skip_from:
            start, last = h, skip_from[i]
            for j in range(i, last + 1):
                h = block(h, w.blocks[j])
            h = nd.add(h, start)
            i = last + 1
        else:
            h = block(h, w.blocks[i])
            i += 1
    g = nd.conv3x3(h, w.output.weight, w.output.bias)
    _check_finite(g, "self-calibrated net")
    return g


def unroll(x: Tensor, ew: EnhNetWeights, sw: SelfCalWeights, stages: int = 3) -> StageTrace:
    """Run the weight-shared stage recurrence.

    ``v_0 = x``; ``t_s = enh(v_s)``; ``z_s = x / t_s``;
    ``v_{s+1} = clamp(x + selfcal(z_s), 0, 1)``. The self-calibrated net is
    not evaluated after the last stage since nothing consumes its output.
    """
    if stages < 1:
        raise ValueError(f"stage count must be >= 1, got {stages}")
    trace = StageTrace()
    v = x
    for s in range(stages):
        t = enhancement_forward(v, ew)
        z = nd.div(x, t)
        trace.inputs.append(v)
        trace.illumination.append(t)
        trace.enhanced.append(z)
        if s + 1 < stages:
            v = nd.clamp(nd.add(x, selfcal_forward(z, sw, "train")), 0.0, 1.0)
    return trace


def infer_illumination(x: Tensor, ew: EnhNetWeights) -> Tensor:
    return enhancement_forward(x, ew)


def inference_macs(height: int, width: int) -> int:
    """Multiply-accumulates of the enhancement net's convolutions."""
    return ENH_BLOCKS * 3 * 3 * 9 * height * width
