from __future__ import annotations

import torch


class ThresholdFunction(torch.autograd.Function):
    """
    per-query SparseK thresholds of a chunk, computed outside autograd by the stream.

    dtau_i / du_j = 1 / |S_i| for j in the fractional set S_i, 0 elsewhere.
    Through m_ij = clamp(u_j - tau_i, 0, 1) this gives the SparseK Jacobian s (v - mean_S v).
    Only scores of the current chunk receive gradient; carried entries are constants.

    forward args:
        u:        (c,) chunk scores
        taus:     (c,) thresholds, +inf where the query has no selection yet, -inf when infeasible
        supports: (c,) |S_i|, counted over all positions (cache included)
        limits:   (c,) last chunk-local index entering tau_i, -1 when none
    """

    @staticmethod
    def forward(ctx, u: torch.Tensor, taus: torch.Tensor, supports: torch.Tensor, limits: torch.Tensor):
        ctx.save_for_backward(u.detach(), taus, supports, limits)
        return taus.clone()

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        u, taus, supports, limits = ctx.saved_tensors
        c = u.shape[0]
        live = torch.isfinite(taus) & (supports > 0)
        j = torch.arange(c)
        member = (j.unsqueeze(0) <= limits.unsqueeze(1)) \
            & (u.unsqueeze(0) > taus.unsqueeze(1)) \
            & (u.unsqueeze(0) < taus.unsqueeze(1) + 1.0) \
            & live.unsqueeze(1)
        per_query = torch.where(live, grad / supports.clamp(min=1).to(grad.dtype), torch.zeros_like(grad))
        grad_u = (member.to(grad.dtype) * per_query.unsqueeze(1)).sum(dim=0)
        return grad_u, None, None, None


def thresholds(u: torch.Tensor, taus, supports, limits) -> torch.Tensor:
    return ThresholdFunction.apply(
        u,
        torch.as_tensor(taus, dtype=u.dtype),
        torch.as_tensor(supports, dtype=torch.long),
        torch.as_tensor(limits, dtype=torch.long),
    )
