"""Permuting rows and columns before or after a layer gives the same
answer, while any relabeling that scrambles cells across rows fails on a
concrete single-1 witness input.

Run: python3 demos/equivariance.py
"""

import numpy as np

from exchtensor.layers import (
    ExchLayerParams,
    exchangeable_tensor_layer,
    random_layer_params,
)
from exchtensor.sparse import (
    PermutationSpec,
    SparseExchangeableTensor,
    apply_permutation,
)
from exchtensor.verify import (
    enumerate_flat_permutations,
    find_witness,
    generic_scalar_blocks,
    is_legal_permutation,
)

rng = np.random.default_rng(0)

# a sparse 4x5 matrix, 12 of 20 cells observed, 3 input channels
picks = rng.choice(20, size=12, replace=False)
indices = np.stack(np.unravel_index(picks, (4, 5)), axis=1)
t = SparseExchangeableTensor((4, 5), indices, rng.normal(size=(12, 3)))
layer = random_layer_params(2, 3, 2, rng, nonlinearity="leaky_relu")

perm = PermutationSpec.random((4, 5), rng)
after = apply_permutation(exchangeable_tensor_layer(t, layer), perm)
before = exchangeable_tensor_layer(apply_permutation(t, perm), layer)
dev = np.abs(after.values - before.values).max()
print(f"layer(permute(x)) vs permute(layer(x)): max deviation {dev:.2e}")

# census over the 2x2 grid: of the 4! = 24 relabelings of the four
# cells, only the ones that factor into a row swap times a column swap
# commute with a generic layer; each of the rest breaks on some
# single-1 input
generic = ExchLayerParams(blocks=generic_scalar_blocks(2, rng),
                          bias=np.zeros(1))
apply_layer = lambda x: exchangeable_tensor_layer(x, generic)
dims = (2, 2)
legal = witnessed = illegal = 0
for flat in enumerate_flat_permutations(dims):
    if is_legal_permutation(flat, dims)[0]:
        legal += 1
        continue
    illegal += 1
    witnessed += find_witness(apply_layer, dims, flat).found
print(f"2x2 census: {legal}/{legal + illegal} relabelings factor per "
      f"axis; witnesses refute {witnessed}/{illegal} of the rest")
