"""Training-free quality metrics for pruned models.

Accuracy is not measurable here (nothing is fine-tuned), so the report
uses proxies: relative reconstruction error at taps and logits, and the
top-1 agreement rate between original and pruned predictions on probe
images.  These are labeled as proxies everywhere they appear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .centrality import (
    DROP,
    CentralAssignment,
    build_graph,
    keep_count_for_rate,
    select_central_filters,
    threshold_for_rate,
)
from .errors import ConfigError, ShapeError
from .model import ModelGraph, count_flops_params, forward_capture, member_tap
from .similarity import SimilarityMatrix

L2_EPS = 1e-12

STRATEGIES = ("cf", "cf_no_adjust", "random", "reverse")


@dataclass
class PrunedModelReport:
    strategy: str
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    tap_errors: dict[str, float] = field(default_factory=dict)
    logit_error: float = 0.0
    top1_agreement: float = 1.0
    surrogate_costs: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def flops_reduction(self) -> float:
        return 1.0 - self.flops_after / self.flops_before if self.flops_before else 0.0

    @property
    def params_reduction(self) -> float:
        return 1.0 - self.params_after / self.params_before if self.params_before else 0.0

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "flops": {"before": self.flops_before, "after": self.flops_after,
                      "reduction": self.flops_reduction},
            "params": {"before": self.params_before, "after": self.params_after,
                       "reduction": self.params_reduction},
            "tap_errors": {k: float(v) for k, v in sorted(self.tap_errors.items())},
            "logit_error": float(self.logit_error),
            "top1_agreement_proxy": float(self.top1_agreement),
            "surrogate_costs": {k: float(v) for k, v in sorted(self.surrogate_costs.items())},
            "notes": self.notes,
        }

    def table(self) -> str:
        """Text table in the accuracy/FLOPs(PR)/params(PR) layout, with the
        agreement proxy standing in for accuracy."""
        rows = [
            ("Model", "Top1Agree(proxy)", "FLOPs(PR)", "Parameters(PR)"),
            ("original", "1.0000",
             f"{self.flops_before / 1e6:.2f}M(0.0%)",
             f"{self.params_before / 1e6:.2f}M(0.0%)"),
            (f"pruned[{self.strategy}]", f"{self.top1_agreement:.4f}",
             f"{self.flops_after / 1e6:.2f}M({100 * self.flops_reduction:.1f}%)",
             f"{self.params_after / 1e6:.2f}M({100 * self.params_reduction:.1f}%)"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def relative_l2(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Mean over probes of ||ref - cand||2 / max(||ref||2, eps)."""
    if reference.shape != candidate.shape:
        raise ShapeError("probe activations differ in shape",
                         expected=reference.shape, actual=candidate.shape)
    ref = reference.reshape(reference.shape[0], -1).astype(np.float64)
    cand = candidate.reshape(candidate.shape[0], -1).astype(np.float64)
    num = np.linalg.norm(ref - cand, axis=1)
    den = np.maximum(np.linalg.norm(ref, axis=1), L2_EPS)
    return float(np.mean(num / den))


def reconstruction_error(original: ModelGraph, pruned: ModelGraph, probes,
                         taps=None, keep_map=None):
    """Per-tap relative L2 error plus final-logit error and top-1 agreement.

    `keep_map` names, per tap, the original channel indices surviving in
    the pruned model (default: all channels, for taps whose producer was
    not pruned).
    """
    probes = np.asarray(probes, dtype=np.float32)
    if taps is None:
        taps = [t for t in original.tap_ids() if pruned.has_node(t)]
    keep_map = keep_map or {}
    acts_o = forward_capture(original, probes, taps)
    acts_p = forward_capture(pruned, probes, taps)
    tap_errors = {}
    for t in taps:
        ref = acts_o.activations[t]
        cand = acts_p.activations[t]
        keep = keep_map.get(t)
        if keep is not None:
            ref = ref[:, keep]
        tap_errors[t] = relative_l2(ref, cand)
    logit_error = relative_l2(acts_o.logits, acts_p.logits)
    agreement = float(np.mean(np.argmax(acts_o.logits, axis=1) == np.argmax(acts_p.logits, axis=1)))
    return tap_errors, logit_error, agreement


def logit_error(original: ModelGraph, pruned: ModelGraph, probes) -> float:
    probes = np.asarray(probes, dtype=np.float32)
    ref = forward_capture(original, probes, taps=()).logits
    cand = forward_capture(pruned, probes, taps=()).logits
    return relative_l2(ref, cand)


def ablation_select(S: SimilarityMatrix, strategy: str, lam: float,
                    seed=None, edge_mode: str = "positive", theta=None) -> CentralAssignment:
    """Select filters for one layer under a named strategy.

    cf / cf_no_adjust run the centrality pipeline (adjustment skipping is
    handled at plan level); reverse keeps the lowest-centrality node each
    round; random keeps a uniform seeded subset and assigns each pruned
    filter to its most-similar kept channel.  A fixed theta replaces the
    rate-driven threshold search for the graph-based strategies.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    pick = "lowest" if strategy == "reverse" else "highest"
    if strategy in ("cf", "cf_no_adjust", "reverse"):
        if theta is not None:
            return select_central_filters(S, build_graph(S, theta, edge_mode), pick=pick)
        _, assignment = threshold_for_rate(
            S, lam, edge_mode=edge_mode,
            selector=lambda mat, graph: select_central_filters(mat, graph, pick=pick))
        return assignment
    if theta is not None:
        raise ConfigError("fixed theta does not apply to the random strategy")
    # random
    if seed is None:
        raise ConfigError("random strategy requires a seed")
    if not (0.0 <= lam < 1.0):
        raise ConfigError(f"compression rate must be in [0, 1), got {lam}")
    rng = np.random.default_rng(seed)
    n = S.n
    target = keep_count_for_rate(n, lam)
    live = [i for i in range(n) if i not in S.dead_channels]
    picked = sorted(int(i) for i in rng.choice(live, size=min(target, len(live)), replace=False)) \
        if live else []
    keep = list(picked)
    for d in sorted(S.dead_channels):
        if len(keep) >= target:
            break
        keep.append(d)
    keep = sorted(keep)
    kept = set(keep)
    assignment, signs = {}, {}
    for x in range(n):
        if x in kept:
            continue
        if x in S.dead_channels:
            assignment[x] = DROP
            continue
        sims = np.abs(S.matrix[x, keep])
        c = keep[int(np.argmax(sims))]
        assignment[x] = c
        signs[x] = 1 if S.matrix[x, c] >= 0 else -1
    return CentralAssignment(S.layer_id, keep, assignment, signs, {}, theta=0.0)


def similarity_histogram(S: SimilarityMatrix, bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Counts of off-diagonal |S| values per bin over [0, 1].

    Returns (counts, bin_edges); counts sum to n(n-1)/2.
    """
    if not (0.0 < bin_width <= 1.0):
        raise ConfigError(f"bin width must be in (0, 1], got {bin_width}")
    n = S.n
    iu = np.triu_indices(n, k=1)
    values = np.abs(S.matrix[iu])
    nbins = int(np.ceil(1.0 / bin_width))
    edges = np.minimum(np.arange(nbins + 1) * bin_width, 1.0)
    counts, _ = np.histogram(values, bins=edges)
    return counts, edges


def build_report(original: ModelGraph, pruned: ModelGraph, plan, probes,
                 strategy="cf") -> PrunedModelReport:
    """Assemble the full report for a pruned model."""
    fb, pb = count_flops_params(original)
    fa, pa = count_flops_params(pruned)
    keep_map = {}
    surrogate = {}
    for lid in plan.layer_ids():
        rec = plan.record_for(lid)
        surrogate[lid] = rec.surrogate_cost
        tap = member_tap(original, lid)
        if tap is not None:
            keep_map[tap] = rec.keep
    taps = [t for t in original.tap_ids() if pruned.has_node(t)]
    tap_errors, lerr, agreement = reconstruction_error(original, pruned, probes, taps, keep_map)
    return PrunedModelReport(
        strategy=strategy,
        flops_before=fb, flops_after=fa,
        params_before=pb, params_after=pa,
        tap_errors=tap_errors,
        logit_error=lerr,
        top1_agreement=agreement,
        surrogate_costs=surrogate,
        notes=[
            "error/agreement metrics are training-free proxies, not accuracy",
            "fine-tuning skipped (out of scope)",
        ],
    )
