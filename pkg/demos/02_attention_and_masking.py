"""
Attention blocks and the top-k mask
===================================

The model routes genomic "function tokens" against a bag of patch
features with multi-head cross-attention, then keeps only the strongest
k percent of patches per token. This walkthrough runs the raw blocks on
a toy bag so the shapes and the masking rule are visible.
"""

import numpy as np

from histodistill import autodiff as ad
from histodistill.autodiff import tensor
from histodistill.blocks import MhcaParams, init_tokens, linear, linear_params, mhsa_forward, mhca_forward
from histodistill.model import topk_masked_softmax

rng = np.random.default_rng(11)

width, heads = 8, 2
n_patches, feature_dim = 6, 5
n_tokens = 3

# project raw patch features into the working width, exactly as the
# association branch does on entry
w_in, b_in = linear_params(rng, feature_dim, width)
bag = tensor(rng.normal(size=(n_patches, feature_dim)))
projected = linear(bag, w_in, b_in)
print("projected bag:", projected.shape)

# learnable query tokens, one per genomic category
tokens = init_tokens(rng, n_tokens, width)
print("tokens:", tokens.shape)

# ---------------------------------------------------------------------------
# cross-attention: tokens query the bag
# ---------------------------------------------------------------------------

mhca = MhcaParams.init(rng, width, heads)
out, scores = mhca_forward(mhca, tokens, projected)
print("\ncross-attention output:", out.shape, " scores:", scores.shape)

weights = ad.softmax(scores, axis=1).values
print("attention rows sum to:", weights.sum(axis=1))

# self-attention over the tokens reuses the same parameter layout
mixed = mhsa_forward(MhcaParams.init(rng, width, heads), out)
print("token self-attention output:", mixed.shape)

# ---------------------------------------------------------------------------
# the top-k masked softmax
# ---------------------------------------------------------------------------

# Per token row, keep m = max(1, round(k% of N_p)) patches and renormalize
# over the survivors; everything else becomes an exact zero.

for k in (20.0, 50.0, 100.0):
    masked = topk_masked_softmax(scores.values, k)
    kept = np.count_nonzero(masked, axis=1)
    print(f"k = {k:5.1f}%  ->  {kept[0]} of {n_patches} patches per row, "
          f"row sums {masked.sum(axis=1)}")

masked = topk_masked_softmax(scores.values, 50.0)
print("\nmasked matrix at k=50 (zeros are structural):")
print(np.round(masked, 3))

# the surviving weights are the softmax weights renormalized, so the
# ranking inside a row never changes
row = weights[0]
surv = masked[0] > 0
print("\nkept patches are the top softmax entries:",
      np.array_equal(np.sort(np.argsort(row)[-surv.sum():]), np.flatnonzero(surv)))

# ---------------------------------------------------------------------------
# ties and the single-patch floor
# ---------------------------------------------------------------------------

tied = np.zeros((1, 4))
print("\nall-tied scores, k=50 keeps the lowest indices:",
      np.flatnonzero(topk_masked_softmax(tied, 50.0)[0]))
print("k=1 on 4 patches still keeps one:",
      np.count_nonzero(topk_masked_softmax(tied, 1.0)[0]))
