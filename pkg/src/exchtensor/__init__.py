"""Permutation-equivariant layers and matrix completion for sparse exchangeable arrays."""

from .sparse import (
    SparseExchangeableTensor,
    AxisGroups,
    PermutationSpec,
    build_sparse,
    axis_groups,
    apply_permutation,
    vectorize_index,
    unvectorize_index,
    to_dense,
    from_dense,
)

__version__ = "0.1.0"
