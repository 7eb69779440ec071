"""Bipartite matching between teacher targets and student predictions.

The pairwise cost for a real target i against prediction j is
``-alpha * p_j(c_i) + beta * ||emb_i - token_j||_2`` (class probability from a
softmax, embedding distance as the plain Euclidean norm); rows of padding
targets cost zero against every prediction.  The optimal permutation feeds a
loss of weighted cross-entropy over all queries plus smooth-L1 on the matched
real pairs, both scaled by 1/S.  Matching is a non-differentiable oracle:
gradients flow through the loss terms only, never through the assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import Config
from .errors import NonFinite, ShapeMismatch
from .types import Assignment, LossBreakdown, StudentOutput, TargetSet


@dataclass
class CostMatrix:
    """Square matrix of pairwise matching costs, costs[i, j] = C(target_i, pred_j)."""
    costs: np.ndarray


def pairwise_cost(targets: TargetSet, preds: StudentOutput, cfg: Config) -> CostMatrix:
    """Build the S x S cost matrix; padding-target rows are identically zero."""
    s = cfg.num_queries
    if targets.categories.shape != (s,):
        raise ShapeMismatch(f"expected {s} target categories, got {tuple(targets.categories.shape)}")
    if preds.class_logits.shape[0] != s or preds.prompt_tokens.shape[0] != s:
        raise ShapeMismatch("prediction rows do not match num_queries")
    with torch.no_grad():
        probs = torch.softmax(preds.class_logits, dim=-1)
        diff = targets.embeddings[:, None, :] - preds.prompt_tokens[None, :, :]
        dist = torch.linalg.vector_norm(diff, dim=-1)  # (S, S)
        real = targets.categories != cfg.no_part_index
        class_term = probs[:, targets.categories].T
        costs = -cfg.alpha * class_term + cfg.beta * dist
        costs = torch.where(real[:, None], costs, torch.zeros_like(costs))
    return CostMatrix(costs.detach().cpu().numpy().astype(np.float64))


def hungarian_assign(costs: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-cost permutation, canonicalized to the lexicographically
    smallest optimum over (target index, prediction index).

    The canonical choice makes tied optima (zero padding rows, duplicate
    predictions) deterministic without affecting the total cost.
    """
    m = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"cost matrix must be square, got {m.shape}")
    if not np.isfinite(m).all():
        raise NonFinite("cost matrix contains NaN or Inf")
    size = m.shape[0]
    rows, cols = linear_sum_assignment(m)
    best_total = float(m[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best_total))

    perm = np.empty(size, dtype=np.int64)
    remaining = list(range(size))
    fixed = 0.0
    for i in range(size):
        for j in remaining:
            rest_cols = [c for c in remaining if c != j]
            candidate = fixed + m[i, j] + _optimal_cost(m, range(i + 1, size), rest_cols)
            if math.isclose(candidate, best_total, rel_tol=0.0, abs_tol=tol):
                perm[i] = j
                fixed += m[i, j]
                remaining.remove(j)
                break
        else:  # pragma: no cover - an optimal completion always exists
            raise RuntimeError("no admissible column during canonicalization")
    total = float(sum(m[i, perm[i]] for i in range(size)))
    return Assignment(target_to_pred=perm, total_cost=total)


def _optimal_cost(m: np.ndarray, rows, cols) -> float:
    rows = list(rows)
    if not rows:
        return 0.0
    sub = m[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def match_sets(targets: TargetSet, preds: StudentOutput, cfg: Config) -> Assignment:
    return hungarian_assign(pairwise_cost(targets, preds, cfg))


def _matched_ce_terms(targets: TargetSet, preds: StudentOutput, assignment: Assignment,
                      cfg: Config) -> torch.Tensor:
    """Per-target weighted cross-entropy against the matched predictions."""
    order = torch.from_numpy(assignment.target_to_pred)
    logits = preds.class_logits[order]
    weight = torch.ones(cfg.num_categories + 1, dtype=logits.dtype)
    weight[cfg.no_part_index] = cfg.eos_weight
    return F.cross_entropy(logits, targets.categories, weight=weight, reduction="none")


def _matched_sl1_terms(targets: TargetSet, preds: StudentOutput,
                       assignment: Assignment) -> torch.Tensor:
    """Per-target smooth-L1 (mean over coordinates) against matched tokens."""
    order = torch.from_numpy(assignment.target_to_pred)
    tokens = preds.prompt_tokens[order]
    return F.smooth_l1_loss(tokens, targets.embeddings, reduction="none").mean(dim=1)


def classification_loss(targets: TargetSet, preds: StudentOutput, assignment: Assignment,
                        cfg: Config) -> torch.Tensor:
    """Mean over all S queries of the weighted cross-entropy (pads included)."""
    return _matched_ce_terms(targets, preds, assignment, cfg).sum() / cfg.num_queries


def regression_loss(targets: TargetSet, preds: StudentOutput, assignment: Assignment,
                    cfg: Config) -> torch.Tensor:
    """Mean over real targets of the smooth-L1 embedding distance; 0 if none."""
    real = targets.categories != cfg.no_part_index
    if not bool(real.any()):
        return preds.prompt_tokens.new_zeros(())
    return _matched_sl1_terms(targets, preds, assignment)[real].mean()


def loss_with_assignment(targets: TargetSet, preds: StudentOutput, assignment: Assignment,
                         cfg: Config) -> LossBreakdown:
    """Training loss under a fixed assignment:
    (1/S) * sum_i (lambda_cls * CE_i + 1{real_i} * lambda_reg * SL1_i)."""
    s = cfg.num_queries
    real = (targets.categories != cfg.no_part_index).to(preds.prompt_tokens.dtype)
    ce = _matched_ce_terms(targets, preds, assignment, cfg)
    sl1 = _matched_sl1_terms(targets, preds, assignment)
    per_query = cfg.lambda_cls * ce + real * cfg.lambda_reg * sl1
    total = per_query.sum() / s
    cls = (cfg.lambda_cls * ce.sum() / s).detach()
    reg = ((real * cfg.lambda_reg * sl1).sum() / s).detach()
    return LossBreakdown(total=total, cls=cls, reg=reg, per_query=per_query.detach())


def total_loss(targets: TargetSet, preds: StudentOutput, cfg: Config) -> LossBreakdown:
    """Match optimally, then evaluate the loss under that assignment."""
    assignment = match_sets(targets, preds, cfg)
    return loss_with_assignment(targets, preds, assignment, cfg)
