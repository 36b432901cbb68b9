from sparsekit.ops.sparsek import (
    KBudget, as_budget, SparseKSolution, PartialSortStats, partial_stats,
    sparsek, sparsek_partial, sparsek_jvp, topk_hard, sparsek_st, kkt_certificate,
    SparseKFunction, sparsek_tensor, sparsek_st_tensor,
)
from sparsekit.ops.stream import (
    StreamState, stream_init, stream_init_capped, stream_push, stream_solution, stream_mask,
)
