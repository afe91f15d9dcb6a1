"""Deployment bundle: integer weight codes plus per-precision banks.

The device stores each quantized layer once, as codes at the highest
bit-width b1 (one byte per code for b1 <= 8, two for wider), and derives
every lower precision at load time by bit truncation and mean alignment.
Unquantized first/last layers and the BN/clipping banks ride along in
full precision so that evaluation from the bundle reproduces in-memory
evaluation exactly.

Layout (version 1, little-endian, CRC32 trailer over everything before it):
  magic "AQDB" | version u32 | arch JSON (length-prefixed UTF-8)
  per learnable layer: name | code bit-width u8 (0 = full precision)
                       dims | packed codes + mean_b1 f64, or raw f64 weights
  bank: n_bits u8, bit u8 each; per bit: per BN layer gamma/beta/mean/var
        f64 arrays, then per quantized layer alpha f64
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .network import ArchSpec, BitWidthSet, PrecisionBank, QuantNet
from .quantizers import QuantizedWeightView, quantize_weights_dorefa
from .serialize import ByteReader, ByteWriter, CorruptFileError, atomic_write_bytes, read_file

MAGIC = b"AQDB"
VERSION = 1


def _code_bytes(b1: int) -> int:
    return (b1 + 7) // 8


def _pack_codes(codes: np.ndarray, b1: int) -> bytes:
    dtype = "<u1" if _code_bytes(b1) == 1 else "<u2"
    return np.ascontiguousarray(codes, dtype=dtype).tobytes()


def _unpack_codes(raw: bytes, b1: int, shape: tuple) -> np.ndarray:
    dtype = "<u1" if _code_bytes(b1) == 1 else "<u2"
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.uint16)


@dataclass
class SizeReport:
    code_payload: int       # packed integer codes
    fp_weight_payload: int  # unquantized first/last layer weights (f64)
    bank_payload: int       # BN arrays and clipping values
    framing: int            # magic, headers, names, dims, CRC

    @property
    def total(self) -> int:
        return self.code_payload + self.fp_weight_payload + self.bank_payload + self.framing


class DeploymentBundle:
    """Parsed bundle contents, ready to rebuild an eval-only network."""

    def __init__(self, arch: ArchSpec, bits: BitWidthSet,
                 views: dict[str, QuantizedWeightView],
                 fp_weights: dict[str, np.ndarray],
                 bank_values: dict[int, dict],
                 size_report: SizeReport):
        self.arch = arch
        self.bits = bits
        self.views = views
        self.fp_weights = fp_weights
        self.bank_values = bank_values
        self.size_report = size_report

    def build_network(self, bn_momentum: float = 0.1) -> QuantNet:
        bank = PrecisionBank(self.bits, self.arch, bn_momentum=bn_momentum)
        for b, entry_vals in self.bank_values.items():
            entry = bank.entry(b)
            for name, (gamma, beta, mean, var) in entry_vals["bn"].items():
                st = entry.bn[name]
                st.gamma.data = gamma.copy()
                st.beta.data = beta.copy()
                st.running_mean = mean.copy()
                st.running_var = var.copy()
            for name, alpha in entry_vals["alpha"].items():
                entry.alpha[name].data = np.asarray(alpha)
        return QuantNet.from_codes(self.arch, self.bits, bank, self.views, self.fp_weights)


def export_bundle(path: str, net: QuantNet, bits: BitWidthSet | None = None) -> SizeReport:
    """Write the network's codes and banks; returns the byte accounting."""
    bits = bits or net.bits
    arch = net.arch
    b1 = bits.b1
    w = ByteWriter()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.text(json.dumps(arch.to_json(), sort_keys=True))
    code_payload = fp_payload = 0
    for name in arch.learnable_names:
        w.text(name)
        shape = arch.weight_shape(name)
        if name in arch.block_index:
            view = quantize_weights_dorefa(net.weights[name].data, b1)
            w.u8(b1)
            w.u8(len(shape))
            for d in shape:
                w.u32(d)
            packed = _pack_codes(view.codes, b1)
            w.blob(packed)
            w.f64(view.mean_b1)
            code_payload += len(packed)
        else:
            wd = net.weights[name].data
            w.u8(0)
            w.f64_array(wd)
            w.f64(float(np.mean(wd)))
            fp_payload += wd.size * 8
    bank_start = w.size
    w.u8(len(bits))
    for b in bits:
        w.u8(b)
    for b in bits:
        entry = net.bank.entry(b)
        for name in arch.bn_names:
            st = entry.bn[name]
            for arr in (st.gamma.data, st.beta.data, st.running_mean, st.running_var):
                w.f64_array(arr)
        for name in arch.quantized_names:
            w.f64(float(entry.alpha[name].data))
    bank_payload = w.size - bank_start
    blob = w.finish()
    atomic_write_bytes(path, blob)
    framing = len(blob) - code_payload - fp_payload - bank_payload
    return SizeReport(code_payload, fp_payload, bank_payload, framing)


def load_bundle(path: str) -> DeploymentBundle:
    buf = read_file(path)
    if buf[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = ByteReader(buf)
    r.raw(4)  # magic, already validated
    version = r.u32()
    if version != VERSION:
        raise CorruptFileError(f"unsupported bundle version {version}")
    arch = ArchSpec.from_json(json.loads(r.text()))
    views: dict[str, QuantizedWeightView] = {}
    fp_weights: dict[str, np.ndarray] = {}
    code_payload = fp_payload = 0
    for _ in arch.learnable_names:
        name = r.text()
        bw = r.u8()
        if bw == 0:
            fp_weights[name] = r.f64_array()
            r.f64()  # stored mean, informational
            fp_payload += fp_weights[name].size * 8
        else:
            ndim = r.u8()
            shape = tuple(r.u32() for _ in range(ndim))
            raw = r.blob()
            mean_b1 = r.f64()
            views[name] = QuantizedWeightView(
                codes=_unpack_codes(raw, bw, shape), b1=bw, mean_b1=mean_b1
            )
            code_payload += len(raw)
    pos_before_bank = r.pos
    n_bits = r.u8()
    bits = BitWidthSet([r.u8() for _ in range(n_bits)])
    bank_values: dict[int, dict] = {}
    for b in bits:
        entry = {"bn": {}, "alpha": {}}
        for name in arch.bn_names:
            gamma, beta, mean, var = (r.f64_array() for _ in range(4))
            entry["bn"][name] = (gamma, beta, mean, var)
        for name in arch.quantized_names:
            entry["alpha"][name] = r.f64()
        bank_values[b] = entry
    bank_payload = r.pos - pos_before_bank
    r.done()
    framing = len(buf) - code_payload - fp_payload - bank_payload
    report = SizeReport(code_payload, fp_payload, bank_payload, framing)
    return DeploymentBundle(arch, bits, views, fp_weights, bank_values, report)
