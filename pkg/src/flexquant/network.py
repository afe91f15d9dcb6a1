"""A shared-weight network executable at any supported bit-width.

One set of latent full-precision weights serves every precision: each
forward quantizes them on the fly at the requested bit-width. Per-precision
state (batch-norm parameters and statistics, activation clipping values)
lives in a PrecisionBank keyed by bit-width. The first and last learnable
layers always run in full precision; the learnable layers between them are
the quantized blocks, and any of those blocks can be swapped to execute at
a teacher bit-width instead of the student's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .quantizers import (
    BitWidthError,
    QuantizedWeightView,
    dequantize_codes,
    mean_align,
    quantize_weights_at,
    quantize_weights_dorefa,
    quantize_activation,
    truncate_codes,
    weight_forward,
)


class MissingBankError(KeyError):
    """No bank entry exists for the requested bit-width."""

    def __init__(self, b: int):
        super().__init__(f"no bank entry for bit-width {b}; train it or run calibration first")
        self.bit_width = b

    def __str__(self):
        return self.args[0]


class ContractError(ValueError):
    """forward_at called with an inconsistent mask/teacher combination."""


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class BatchNorm:
    features: int
    kind: str = field(default="bn", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    kind: str = field(default="pool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


_LEARNABLE = ("dense", "conv")


class ArchSpec:
    """Ordered layer descriptors plus the derived quantization roles.

    Learnable layers (dense/conv) are named positionally. The first and
    last of them are unquantized; the rest are the quantized blocks,
    numbered 1..L from input to output. Dense/conv layers carry no bias:
    in these nets a batch-norm always follows and supplies the offset.
    """

    def __init__(self, layers: list):
        if not layers:
            raise ValueError("architecture needs at least one layer")
        self.layers = list(layers)
        self.names = [f"{spec.kind}{i}" for i, spec in enumerate(self.layers)]
        self.learnable_names = [
            name for spec, name in zip(self.layers, self.names) if spec.kind in _LEARNABLE
        ]
        if not self.learnable_names:
            raise ValueError("architecture has no learnable layers")
        self.quantized_names = self.learnable_names[1:-1]
        self.bn_names = [
            name for spec, name in zip(self.layers, self.names) if spec.kind == "bn"
        ]
        self.block_index = {name: i + 1 for i, name in enumerate(self.quantized_names)}

    @property
    def num_blocks(self) -> int:
        return len(self.quantized_names)

    def weight_shape(self, name: str) -> tuple:
        spec = self.layers[self.names.index(name)]
        if spec.kind == "dense":
            return (spec.in_features, spec.out_features)
        if spec.kind == "conv":
            return (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        raise ValueError(f"{name} is not a learnable layer")

    def to_json(self) -> list[dict]:
        out = []
        for spec in self.layers:
            d = {"kind": spec.kind}
            for key, val in spec.__dict__.items():
                if key != "kind":
                    d[key] = val
            out.append(d)
        return out

    @staticmethod
    def from_json(data: list[dict]) -> "ArchSpec":
        builders = {
            "dense": Dense, "conv": Conv, "bn": BatchNorm,
            "relu": ReLU, "pool": MaxPool, "flatten": Flatten,
        }
        layers = []
        for d in data:
            kwargs = {k: v for k, v in d.items() if k != "kind"}
            layers.append(builders[d["kind"]](**kwargs))
        return ArchSpec(layers)


def mlp(input_dim: int, hidden: list[int], classes: int) -> ArchSpec:
    """Dense -> BN -> ReLU stack; hidden layers beyond the first are quantized."""
    layers: list = []
    prev = input_dim
    for width in hidden:
        layers += [Dense(prev, width), BatchNorm(width), ReLU()]
        prev = width
    layers += [Dense(prev, classes), BatchNorm(classes)]
    return ArchSpec(layers)


def small_cnn(in_channels: int, image_size: int, classes: int,
              channels: list[int] | None = None) -> ArchSpec:
    """Conv -> BN -> ReLU blocks with one pooling stage, then a dense head."""
    channels = channels or [8, 8, 16]
    layers: list = []
    prev = in_channels
    for i, ch in enumerate(channels):
        layers += [Conv(prev, ch, kernel=3, stride=1, padding=1), BatchNorm(ch), ReLU()]
        if i == 0:
            layers.append(MaxPool(2))
        prev = ch
    feat = (image_size // 2) ** 2 * prev
    layers += [Flatten(), Dense(feat, classes), BatchNorm(classes)]
    return ArchSpec(layers)


# ---------------------------------------------------------------------------
# bit-width set and swap mask
# ---------------------------------------------------------------------------

class BitWidthSet:
    """Strictly descending, duplicate-free bit-widths in [2, 16]."""

    def __init__(self, bits):
        bits = [int(b) for b in bits]
        if not bits:
            raise BitWidthError("bit-width set is empty")
        if len(set(bits)) != len(bits):
            raise BitWidthError(f"duplicate bit-widths in {bits}")
        for b in bits:
            if not 2 <= b <= 16:
                raise BitWidthError(f"bit-width {b} outside [2, 16]")
        self.bits = sorted(bits, reverse=True)

    @property
    def b1(self) -> int:
        return self.bits[0]

    def teachers_of(self, b: int) -> list[int]:
        """Every strictly higher precision in the set, descending."""
        return [t for t in self.bits if t > b]

    def __iter__(self):
        return iter(self.bits)

    def __len__(self):
        return len(self.bits)

    def __contains__(self, b):
        return int(b) in self.bits

    def __eq__(self, other):
        return isinstance(other, BitWidthSet) and self.bits == other.bits

    def __repr__(self):
        return f"BitWidthSet({self.bits})"


@dataclass
class SwapMask:
    """Per-block booleans: True executes the student block, False the teacher's."""

    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=bool)

    @staticmethod
    def all_student(num_blocks: int) -> "SwapMask":
        return SwapMask(np.ones(num_blocks, dtype=bool))

    @property
    def student_fraction(self) -> float:
        return float(np.mean(self.beta)) if self.beta.size else 1.0

    def any_teacher(self) -> bool:
        return bool(np.any(~self.beta))


# ---------------------------------------------------------------------------
# precision bank
# ---------------------------------------------------------------------------

class BNState:
    def __init__(self, features: int, momentum: float):
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = float(momentum)

    def copy_from(self, other: "BNState") -> None:
        self.gamma.data = other.gamma.data.copy()
        self.beta.data = other.beta.data.copy()
        self.running_mean = other.running_mean.copy()
        self.running_var = other.running_var.copy()


class BankEntry:
    def __init__(self, arch: ArchSpec, alpha_init: float, bn_momentum: float):
        self.bn = {name: BNState(_bn_features(arch, name), bn_momentum) for name in arch.bn_names}
        self.alpha = {
            name: Tensor(np.asarray(float(alpha_init)), requires_grad=True)
            for name in arch.quantized_names
        }


def _bn_features(arch: ArchSpec, name: str) -> int:
    return arch.layers[arch.names.index(name)].features


class PrecisionBank:
    """Per-bit-width BN and clipping state over one architecture.

    share_bn / share_alpha alias the underlying objects across bit-widths,
    which is how the joint and switchable-BN baselines are expressed.
    """

    def __init__(self, bits: BitWidthSet, arch: ArchSpec, alpha_init: float = 6.0,
                 bn_momentum: float = 0.1, share_bn: bool = False, share_alpha: bool = False):
        self.arch = arch
        self.alpha_init = float(alpha_init)
        self.bn_momentum = float(bn_momentum)
        self.share_bn = share_bn
        self.share_alpha = share_alpha
        self.entries: dict[int, BankEntry] = {}
        base = BankEntry(arch, alpha_init, bn_momentum)
        for b in bits:
            if share_bn and share_alpha:
                self.entries[b] = base
            else:
                entry = BankEntry(arch, alpha_init, bn_momentum)
                if share_bn:
                    entry.bn = base.bn
                if share_alpha:
                    entry.alpha = base.alpha
                self.entries[b] = entry

    def entry(self, b: int) -> BankEntry:
        try:
            return self.entries[int(b)]
        except KeyError:
            raise MissingBankError(int(b)) from None

    def has(self, b: int) -> bool:
        return int(b) in self.entries

    def ensure_entry(self, b: int, borrow_from: int, include_stats: bool = False) -> BankEntry:
        """Create a bank entry for b, borrowing the learned values (BN affine
        parameters and the clipping value) from the borrow bit-width.

        Running statistics stay at initialization unless include_stats is
        set: statistics belong to calibration, not to parameter borrowing.
        """
        b = int(b)
        if b in self.entries:
            return self.entries[b]
        src = self.entry(borrow_from)
        entry = BankEntry(self.arch, self.alpha_init, self.bn_momentum)
        for name, st in entry.bn.items():
            st.gamma.data = src.bn[name].gamma.data.copy()
            st.beta.data = src.bn[name].beta.data.copy()
            if include_stats:
                st.running_mean = src.bn[name].running_mean.copy()
                st.running_var = src.bn[name].running_var.copy()
        for name, a in entry.alpha.items():
            a.data = src.alpha[name].data.copy()
        self.entries[b] = entry
        return entry

    def named_parameters(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(BN params, alpha params), deduplicated across shared entries.

        Shared objects are named after the highest bit-width that holds them,
        so parameter names are stable for checkpoints and optimizers.
        """
        bn_params: dict[str, Tensor] = {}
        alpha_params: dict[str, Tensor] = {}
        seen: set[int] = set()
        for b in sorted(self.entries, reverse=True):
            entry = self.entries[b]
            for name, st in entry.bn.items():
                if id(st.gamma) not in seen:
                    seen.add(id(st.gamma))
                    bn_params[f"bank{b}.{name}.gamma"] = st.gamma
                    bn_params[f"bank{b}.{name}.beta"] = st.beta
            for name, a in entry.alpha.items():
                if id(a) not in seen:
                    seen.add(id(a))
                    alpha_params[f"bank{b}.{name}.alpha"] = a
        return bn_params, alpha_params


class StatsCollector:
    """Accumulates exact pooled per-channel moments during calibration."""

    def __init__(self):
        self.sums: dict[str, np.ndarray] = {}
        self.sumsqs: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def update(self, name: str, x: np.ndarray) -> None:
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        count = x.size // x.shape[1]
        s = x.sum(axis=axes)
        sq = (x * x).sum(axis=axes)
        if name not in self.sums:
            self.sums[name] = s
            self.sumsqs[name] = sq
            self.counts[name] = count
        else:
            self.sums[name] += s
            self.sumsqs[name] += sq
            self.counts[name] += count

    def finalize(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for name in self.sums:
            n = self.counts[name]
            mean = self.sums[name] / n
            var = np.maximum(self.sumsqs[name] / n - mean * mean, 0.0)
            out[name] = (mean, var)
        return out


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class QuantNet:
    """Shared latent weights + per-precision banks, runnable at any b in the set."""

    def __init__(self, arch: ArchSpec, bits: BitWidthSet, bank: PrecisionBank,
                 rng: np.random.Generator | None = None):
        self.arch = arch
        self.bits = bits
        self.bank = bank
        self.weights: dict[str, Tensor] = {}
        self._frozen_views: dict[str, QuantizedWeightView] | None = None
        self._frozen_fp: dict[str, np.ndarray] | None = None
        self._value_cache: dict[tuple[str, int], np.ndarray] = {}
        self._node_cache: dict[tuple[str, int], Tensor] = {}
        if rng is not None:
            for name in arch.learnable_names:
                shape = arch.weight_shape(name)
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
                self.weights[name] = Tensor(w, requires_grad=True)

    @classmethod
    def from_codes(cls, arch: ArchSpec, bits: BitWidthSet, bank: PrecisionBank,
                   views: dict[str, QuantizedWeightView],
                   fp_weights: dict[str, np.ndarray]) -> "QuantNet":
        """Eval-only network reconstructed from stored integer codes."""
        net = cls(arch, bits, bank, rng=None)
        net._frozen_views = views
        net._frozen_fp = {k: np.asarray(v, dtype=np.float64) for k, v in fp_weights.items()}
        return net

    @property
    def frozen(self) -> bool:
        return self._frozen_views is not None

    def named_weights(self) -> dict[str, Tensor]:
        return {f"weights.{name}": w for name, w in self.weights.items()}

    def begin_step(self) -> None:
        """Drop recorded quantizer nodes from the previous step."""
        self._node_cache.clear()

    def after_update(self) -> None:
        """Invalidate caches after latent weights changed."""
        self._node_cache.clear()
        self._value_cache.clear()

    # -- weight access ------------------------------------------------------

    def weight_values(self, name: str, b: int) -> np.ndarray:
        """Quantized weight values for one layer, no gradient tracking."""
        key = (name, int(b))
        vals = self._value_cache.get(key)
        if vals is None:
            if self.frozen:
                view = self._frozen_views[name]
                vals = mean_align(
                    dequantize_codes(truncate_codes(view, b), b), view.mean_b1
                )
            else:
                vals = weight_forward(self.weights[name].data, b, self.bits.b1)
            self._value_cache[key] = vals
        return vals

    def _weight_node(self, name: str, b: int) -> Tensor:
        if self.frozen:
            return Tensor(self.weight_values(name, b))
        if ag.active_tape() is None:
            return Tensor(self.weight_values(name, b))
        key = (name, int(b))
        node = self._node_cache.get(key)
        if node is None:
            node = quantize_weights_at(self.weights[name], b, self.bits.b1)
            self._node_cache[key] = node
        return node

    def _fp_weight(self, name: str) -> Tensor:
        if self.frozen:
            return Tensor(self._frozen_fp[name])
        return self.weights[name]

    # -- execution ----------------------------------------------------------

    def forward_at(self, x, b: int, mask: SwapMask | None = None,
                   teacher_b: int | None = None, mode: str = "train",
                   collector: StatsCollector | None = None) -> Tensor:
        """Run the network at bit-width b, optionally swapping blocks to a teacher.

        Swapped blocks execute entirely at the teacher precision: teacher
        weights, teacher clipping value, teacher BN entry. Unquantized
        first/last layers keep full-precision weights but use the student
        bit-width's BN entries.
        """
        b = int(b)
        if mode not in ("train", "eval", "calibrate"):
            raise ValueError(f"unknown mode {mode!r}")
        if self.frozen and mode != "eval":
            raise ContractError("a network loaded from codes is eval-only")
        self.bank.entry(b)  # fail fast with the missing-bank message
        if mask is not None:
            if len(mask.beta) != self.arch.num_blocks:
                raise ContractError(
                    f"mask length {len(mask.beta)} != {self.arch.num_blocks} blocks"
                )
            if mask.any_teacher():
                if teacher_b is None:
                    raise ContractError("mask swaps in teacher blocks but teacher_b is missing")
                teacher_b = int(teacher_b)
                if teacher_b not in self.bits or teacher_b <= b:
                    raise ContractError(
                        f"teacher bit-width {teacher_b} must be in {self.bits.bits} and > {b}"
                    )
                self.bank.entry(teacher_b)
        cur = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        owner = b
        for spec, name in zip(self.arch.layers, self.arch.names):
            kind = spec.kind
            if kind in _LEARNABLE:
                block = self.arch.block_index.get(name)
                if block is None:
                    w = self._fp_weight(name)
                    owner = b
                else:
                    student = mask is None or bool(mask.beta[block - 1])
                    b_eff = b if student else teacher_b
                    alpha = self.bank.entry(b_eff).alpha[name]
                    cur = quantize_activation(cur, alpha, b_eff)
                    w = self._weight_node(name, b_eff)
                    owner = b_eff
                if kind == "dense":
                    cur = ag.matmul(cur, w)
                else:
                    cur = ag.conv2d(cur, w, stride=spec.stride, padding=spec.padding)
            elif kind == "bn":
                st = self.bank.entry(owner).bn[name]
                if mode == "calibrate":
                    if collector is not None:
                        collector.update(name, cur.data)
                    cur = ag.batchnorm(cur, st.gamma, st.beta, st.running_mean,
                                       st.running_var, st.momentum, "train",
                                       update_running=False)
                else:
                    cur = ag.batchnorm(cur, st.gamma, st.beta, st.running_mean,
                                       st.running_var, st.momentum, mode)
            elif kind == "relu":
                cur = ag.relu(cur)
            elif kind == "pool":
                cur = ag.maxpool2d(cur, spec.window)
            elif kind == "flatten":
                cur = ag.flatten(cur)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cur

    def model_distance(self, bi: int, bj: int) -> float:
        """Sum over quantized blocks of the mean |elementwise difference|
        between the two precisions' quantized weights."""
        bi, bj = int(bi), int(bj)
        for bb in (bi, bj):
            if bb not in self.bits:
                raise BitWidthError(f"bit-width {bb} not in {self.bits.bits}")
        if bi == bj:
            return 0.0
        total = 0.0
        for name in self.arch.quantized_names:
            wi = self.weight_values(name, bi)
            wj = self.weight_values(name, bj)
            total += float(np.mean(np.abs(wi - wj)))
        return total
