"""
Group-level ranking losses over batch similarity scores.
"""

from typing import Sequence, Union

import torch

from src.core.exceptions import NumericalError

Scores = Union[torch.Tensor, Sequence[float]]


def _as_tensor(values: Scores) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(torch.float64).reshape(-1)
    return torch.as_tensor(list(values), dtype=torch.float64).reshape(-1)


def circle_loss(
    pos_sims: Scores,
    neg_sims: Scores,
    gamma: float = 32.0,
    weight_pos: float = 1.0,
    weight_neg: float = 1.0,
) -> torch.Tensor:
    """
    Circle loss over K negative and L positive similarities:

        log(1 + sum_i sum_j exp(gamma * (weight_neg * s_neg_i - weight_pos * s_pos_j)))

    Each weight scales the side it is named after: weight_pos multiplies the
    positive similarities and weight_neg the negative ones.
    Evaluated as softplus(logsumexp(.)) so large gamma never overflows.
    Either side empty gives exactly 0.
    """
    pos = _as_tensor(pos_sims)
    neg = _as_tensor(neg_sims)
    if not (torch.isfinite(pos).all() and torch.isfinite(neg).all()):
        raise NumericalError("circle loss received non-finite similarities")
    if pos.numel() == 0 or neg.numel() == 0:
        return torch.zeros((), dtype=torch.float64)

    z = gamma * (weight_neg * neg[:, None] - weight_pos * pos[None, :])
    return torch.logaddexp(torch.zeros((), dtype=torch.float64), torch.logsumexp(z.reshape(-1), dim=0))


def pairwise_margin_loss(pos_sims: Scores, neg_sims: Scores, margin: float = 0.2) -> torch.Tensor:
    """
    Loss used when the circle loss stage is switched off:
    mean (1 - s)^2 over positives plus mean max(0, s - margin)^2 over negatives.
    """
    pos = _as_tensor(pos_sims)
    neg = _as_tensor(neg_sims)
    if not (torch.isfinite(pos).all() and torch.isfinite(neg).all()):
        raise NumericalError("margin loss received non-finite similarities")

    loss = torch.zeros((), dtype=torch.float64)
    if pos.numel():
        loss = loss + ((1.0 - pos) ** 2).mean()
    if neg.numel():
        loss = loss + (torch.clamp(neg - margin, min=0.0) ** 2).mean()
    return loss
