"""Dynamic filters: per-frame softmax kernels that move pixels.

A filter bank whose mass sits on one off-centre tap shifts the frame by one
pixel. Because every kernel is a convex combination, outputs never leave the
range of the source neighbourhood.
"""
import numpy as np

from dynmotion.dynfilter import apply_filters, make_filters
from dynmotion import tensor as tn
from dynmotion.tensor import Tensor

rng = np.random.default_rng(0)
clip = rng.uniform(size=(2, 6, 6))

s = 3
logits = np.full((2, s * s), -30.0)
logits[:, 3] = 30.0  # left-middle tap: out[y, x] = in[y, x - 1]
bank = make_filters(Tensor(logits))
shifted = apply_filters(Tensor(clip), bank).data
print("interior moved right by one pixel:", np.allclose(shifted[:, :, 1:], clip[:, :, :-1]))

random_bank = make_filters(Tensor(rng.normal(scale=3, size=(2, s * s))))
out = apply_filters(Tensor(clip), random_bank).data
print(f"random bank output in [{out.min():.3f}, {out.max():.3f}], source in "
      f"[{clip.min():.3f}, {clip.max():.3f}]")

# gradients flow into the logits
x = Tensor(rng.normal(size=(2, s * s)), requires_grad=True)
pred = apply_filters(Tensor(clip), make_filters(x))
loss = tn.mean(pred * pred)
tn.backward(loss)
print("d loss / d logits:\n", np.round(x.grad, 4))
