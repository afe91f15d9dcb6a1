# Quantizer mechanics, end to end.
#
# One tensor of latent weights becomes integer codes at the highest
# bit-width; every lower precision is a bit-shift away. This script walks
# the whole chain and shows the straight-through gradient at work.

import numpy as np

from flexquant import autograd as ag
from flexquant.autograd import Tape, Tensor
from flexquant.quantizers import (
    dequantize_codes,
    mean_align,
    quantize_activation,
    quantize_levels,
    quantize_weights_at,
    quantize_weights_dorefa,
    truncate_codes,
)

rng = np.random.default_rng(0)

print("=== 1. Level rounding ===")
x = np.array([0.0, 0.1, 0.4, 0.5, 0.9, 1.0])
for b in (2, 4):
    print(f"b={b}: {x} -> {quantize_levels(x, b)}")
print("At b bits there are 2^b levels k/(2^b - 1); 0 and 1 are always levels.\n")

print("=== 2. Weight coding at the flagship bit-width ===")
w = rng.normal(0.0, 0.4, size=8)
view = quantize_weights_dorefa(w, b1=8)
print("latent weights :", np.round(w, 3))
print("8-bit codes    :", view.codes)
print("dequantized    :", np.round(dequantize_codes(view.codes, 8), 3))
print(f"mean at 8 bits : {view.mean_b1:+.5f}\n")

print("=== 3. Lower precisions by dropping code bits ===")
for b in (4, 2):
    codes_b = truncate_codes(view, b)
    w_b = dequantize_codes(codes_b, b)
    aligned = mean_align(w_b, view.mean_b1)
    print(f"b={b}: codes {codes_b}")
    print(f"     dequantized {np.round(w_b, 3)} (mean {w_b.mean():+.4f})")
    print(f"     mean-aligned {np.round(aligned, 3)} (mean {aligned.mean():+.4f})")
print("The additive shift restores the 8-bit tensor's mean exactly.\n")

print("=== 4. Straight-through gradients ===")
w_t = Tensor(w, requires_grad=True)
with Tape() as tape:
    loss = ag.sum_(quantize_weights_at(w_t, 2, 8))
tape.backward(loss)
print("d sum(quantized) / d latent =", w_t.grad)
print("The quantizer is non-differentiable; its backward is exact identity.\n")

print("=== 5. Learnable activation clipping ===")
alpha = Tensor(np.asarray(0.8), requires_grad=True)
acts = Tensor(np.array([-0.5, 0.2, 0.6, 1.1, 2.0]), requires_grad=True)
with Tape() as tape:
    out = quantize_activation(acts, alpha, b=2)
    total = ag.sum_(out)
tape.backward(total)
print("activations  :", acts.data)
print("quantized    :", out.data, "(clip to alpha, round to 2-bit levels, rescale)")
print("d/d acts     :", acts.grad, " <- passes only inside [0, alpha]")
print("d/d alpha    :", alpha.grad, " <- one unit per saturated entry here")
