"""Turn per-layer central-filter selections into applied weight surgery.

A plan is a sequence of prune units.  Each unit covers one coupling group
(usually a single conv layer): the unit's members share an identical keep
set, their filter rows and batchnorm entries are deleted, and every
consumer kernel absorbs the pruned channels' kernels before its input
columns are dropped.

Consumer absorption follows the kernel-accumulation rule k_j += k_x for
each pruned channel x assigned to central j, generalized two ways:

* if a batchnorm sits between the producer conv and its sampled relu, the
  affine mismatch between channels x and j is folded in: the pruned slice
  is scaled by alpha_x/alpha_j and the residual shift lands in the
  consumer bias (times the slice's spatial sum);
* anti-correlated assignments (negative similarity) subtract instead of
  add, via the sign recorded at selection time.

Dead channels carry no kernel: their constant tap value is folded into
the consumer bias and the slice is simply dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .centrality import DROP, CentralAssignment
from .errors import ConfigError, ShapeError, UnsupportedTopologyError
from .model import (
    ModelGraph,
    coupling_groups,
    forward_capture,
    member_tap,
    resolve_dependencies,
)
from .similarity import SimilarityMatrix, average_similarity

PLAN_VERSION = "cfplan/1"


@dataclass
class LayerPruneRecord:
    layer_id: str
    keep: list[int]
    assignment: dict[int, int]          # pruned index -> central index or DROP
    signs: dict[int, int] = field(default_factory=dict)
    dead_values: dict[int, float] = field(default_factory=dict)
    theta: float = 1.0
    rate: float = 0.0
    surrogate_cost: float = 0.0
    no_adjust: bool = False

    def validate(self):
        keep = set(self.keep)
        if not keep:
            raise ConfigError(f"{self.layer_id}: keep set is empty")
        if keep & set(self.assignment):
            raise ConfigError(f"{self.layer_id}: keep and pruned sets overlap")
        for x, c in self.assignment.items():
            if c != DROP and c not in keep:
                raise ConfigError(f"{self.layer_id}: pruned {x} assigned to non-kept {c}")


@dataclass
class PruneUnit:
    group: list[str]                      # member layer ids, topo order
    records: dict[str, LayerPruneRecord]


@dataclass
class PruningPlan:
    units: list[PruneUnit]
    reconciliations: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def record_for(self, layer_id) -> LayerPruneRecord | None:
        for u in self.units:
            if layer_id in u.records:
                return u.records[layer_id]
        return None

    def layer_ids(self) -> list[str]:
        return [lid for u in self.units for lid in u.group]

    def to_json_dict(self) -> dict:
        units = []
        for u in self.units:
            members = {}
            for lid, r in u.records.items():
                members[lid] = {
                    "keep": [int(k) for k in r.keep],
                    "assignment": {str(x): int(c) for x, c in sorted(r.assignment.items())},
                    "signs": {str(x): int(s) for x, s in sorted(r.signs.items())},
                    "dead_values": {str(x): float(v) for x, v in sorted(r.dead_values.items())},
                    "theta": float(r.theta),
                    "rate": float(r.rate),
                    "surrogate_cost": float(r.surrogate_cost),
                    "no_adjust": bool(r.no_adjust),
                }
            units.append({"group": list(u.group), "members": members})
        return {
            "version": PLAN_VERSION,
            "provenance": self.provenance,
            "units": units,
            "reconciliations": self.reconciliations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json_dict(cls, d: dict) -> "PruningPlan":
        if d.get("version") != PLAN_VERSION:
            raise ConfigError(f"unsupported plan version {d.get('version')!r}")
        units = []
        for u in d["units"]:
            records = {}
            for lid, r in u["members"].items():
                records[lid] = LayerPruneRecord(
                    layer_id=lid,
                    keep=[int(k) for k in r["keep"]],
                    assignment={int(x): int(c) for x, c in r["assignment"].items()},
                    signs={int(x): int(s) for x, s in r.get("signs", {}).items()},
                    dead_values={int(x): float(v) for x, v in r.get("dead_values", {}).items()},
                    theta=float(r.get("theta", 1.0)),
                    rate=float(r.get("rate", 0.0)),
                    surrogate_cost=float(r.get("surrogate_cost", 0.0)),
                    no_adjust=bool(r.get("no_adjust", False)),
                )
            units.append(PruneUnit(list(u["group"]), records))
        return cls(units, d.get("reconciliations", []), d.get("provenance", {}))


# -- reconciliation -----------------------------------------------------------


def reconcile_coupling(assignments: dict[str, CentralAssignment], groups,
                       rates=None, similarities=None, no_adjust=False) -> PruningPlan:
    """Force coupled layers onto a shared keep set.

    Within a group the pruned set becomes the intersection of the members'
    pruned sets (keep = union of keeps); filters dropped from a member's
    pruned set are promoted back to centrals there.  Uncoupled layers pass
    through unchanged.
    """
    rates = rates or {}
    similarities = similarities or {}
    grouped = set()
    units: list[PruneUnit] = []
    reconciliations: list[dict] = []

    for group in groups:
        members = sorted(group)
        for m in members:
            if m not in assignments:
                raise ConfigError(f"coupled layer {m} has no assignment")
            grouped.add(m)
        sizes = {m: len(assignments[m].centrals) + len(assignments[m].assignment) for m in members}
        if len(set(sizes.values())) > 1:
            raise ShapeError(f"coupled layers have differing filter counts: {sizes}")
        common = set.intersection(*(set(assignments[m].assignment) for m in members))
        records = {}
        promoted_by_member = {}
        for m in members:
            a = assignments[m]
            promoted = sorted(set(a.assignment) - common)
            keep = sorted(set(a.centrals) | set(promoted))
            new_assignment, new_signs = {}, {}
            for x in sorted(common):
                c = a.assignment[x]
                if c != DROP and c not in keep:
                    # central itself was pruned elsewhere; promote the filter
                    keep.append(x)
                    continue
                new_assignment[x] = c
                if x in a.signs:
                    new_signs[x] = a.signs[x]
            records[m] = _make_record(m, sorted(keep), new_assignment, new_signs,
                                      a, rates.get(m, 0.0), similarities.get(m), no_adjust)
            promoted_by_member[m] = promoted
        if len(members) > 1:
            reconciliations.append({
                "group": members,
                "pruned_intersection": sorted(int(x) for x in common),
                "promoted": {m: [int(x) for x in p] for m, p in promoted_by_member.items()},
            })
        units.append(PruneUnit(members, records))

    for lid, a in assignments.items():
        if lid not in grouped:
            rec = _make_record(lid, a.keep, dict(a.assignment), dict(a.signs),
                               a, rates.get(lid, 0.0), similarities.get(lid), no_adjust)
            units.append(PruneUnit([lid], {lid: rec}))

    plan = PruningPlan(units, reconciliations)
    for u in plan.units:
        for r in u.records.values():
            r.validate()
    return plan


def _make_record(layer_id, keep, assignment, signs, source: CentralAssignment,
                 rate, S: SimilarityMatrix | None, no_adjust) -> LayerPruneRecord:
    dead_values = {}
    if S is not None and S.channel_means is not None:
        for x, c in assignment.items():
            if c == DROP:
                dead_values[x] = float(S.channel_means[x])
    else:
        dead_values = {x: 0.0 for x, c in assignment.items() if c == DROP}
    cost = 0.0
    if S is not None:
        for x, c in assignment.items():
            if c != DROP:
                cost += 1.0 - abs(float(S.matrix[x, c]))
    return LayerPruneRecord(layer_id, list(keep), assignment, signs, dead_values,
                            theta=source.theta, rate=rate, surrogate_cost=cost,
                            no_adjust=no_adjust)


# -- kernel surgery -----------------------------------------------------------


def adjust_consumer_kernels(consumer_weights, assignment, channel_map, sign_table) -> np.ndarray:
    """Fold pruned input slices into their centrals' slices, then drop them.

    `consumer_weights` is (n_out, n_in, kh, kw) or (n_out, n_in); for every
    pruned producer channel x assigned to central j, slice[map(j)] +=
    coeff * slice[map(x)] with coeff from sign_table (plus/minus 1, or a
    folded batchnorm scale).  DROP assignments skip accumulation.  All
    pruned slices are removed from the result.
    """
    w = np.asarray(consumer_weights)
    if w.ndim not in (2, 4):
        raise ShapeError("consumer weights must be 2-D or 4-D", actual=w.shape)
    for x, c in assignment.items():
        if x not in channel_map:
            raise ConfigError(f"channel map lacks pruned index {x}")
        if c != DROP and c not in channel_map:
            raise ConfigError(f"channel map lacks central index {c}")
    acc = w.astype(np.float64)
    for x in sorted(assignment):
        c = assignment[x]
        if c == DROP:
            continue
        coeff = float(sign_table.get(x, 1))
        acc[:, channel_map[c]] += coeff * acc[:, channel_map[x]]
    drop = sorted(channel_map[x] for x in assignment)
    keep_cols = [t for t in range(w.shape[1]) if t not in set(drop)]
    return acc[:, keep_cols].astype(np.float32)


def _following_bn(model: ModelGraph, conv_id: str) -> str | None:
    for s in model.successors(conv_id):
        node = model.node(s)
        if node.kind == "batchnorm" and node.inputs == [conv_id]:
            return s
    return None


def _bn_affine(model: ModelGraph, conv_id: str):
    """(alpha, beta) of the batchnorm directly following a conv, or identity."""
    bn_id = _following_bn(model, conv_id)
    if bn_id is None:
        return None, None
    ws = model.weights[bn_id]
    eps = float(model.node(bn_id).params.get("epsilon", 1e-5))
    alpha = ws["scale"].astype(np.float64) / np.sqrt(ws["var"].astype(np.float64) + eps)
    beta = ws["shift"].astype(np.float64) - ws["mean"].astype(np.float64) * alpha
    return alpha, beta


def _fold_coefficients(record: LayerPruneRecord, alpha, beta):
    """Per-pruned-channel (scale, shift) relating its tap map to the central's.

    Without a producer-side batchnorm this is (sign, 0).  With one, channel
    x's affine is re-expressed through channel j's: scale = sign *
    alpha_x/alpha_j, shift = beta_x - scale * beta_j.
    """
    coeffs, shifts = {}, {}
    for x, c in record.assignment.items():
        if c == DROP:
            continue
        sign = float(record.signs.get(x, 1))
        if alpha is None:
            coeffs[x], shifts[x] = sign, 0.0
        else:
            denom = alpha[c] if abs(alpha[c]) > 1e-6 else np.sign(alpha[c]) * 1e-6 or 1e-6
            scale = sign * float(alpha[x]) / float(denom)
            coeffs[x] = scale
            shifts[x] = float(beta[x]) - scale * float(beta[c])
    return coeffs, shifts


def _apply_unit(model: ModelGraph, unit: PruneUnit):
    """Apply one prune unit in place on a working model copy."""
    scopes = {lid: resolve_dependencies(model, lid) for lid in unit.group}
    keeps = {lid: unit.records[lid].keep for lid in unit.group}
    first = unit.group[0]
    if len(unit.group) > 1:
        for lid in unit.group[1:]:
            if keeps[lid] != keeps[first]:
                raise ConfigError(f"coupled layers {first} and {lid} have different keep sets")
    # snapshot fold inputs before any surgery shifts batchnorm rows
    affines = {lid: _bn_affine(model, lid) for lid in unit.group}
    tap_owner = {}
    for lid in unit.group:
        tap = member_tap(model, lid)
        if tap is not None:
            tap_owner[tap] = lid

    # group consumer slices per consumer node so columns drop exactly once
    per_consumer: dict[str, list] = {}
    seen = set()
    for lid in unit.group:
        for ref in scopes[lid].consumers:
            key = (ref.node_id, tuple(sorted(ref.channel_map.items())))
            if key in seen:
                continue
            seen.add(key)
            owner = tap_owner.get(ref.tap_id, lid)
            per_consumer.setdefault(ref.node_id, []).append((ref, owner))

    for node_id in sorted(per_consumer):
        refs = per_consumer[node_id]
        kind = refs[0][0].kind
        if kind == "batchnorm":
            for ref, owner in refs:
                rec = unit.records[owner]
                drop = {ref.channel_map[x] for x in rec.assignment}
                keep_rows = [t for t in range(model.weights[node_id]["mean"].size) if t not in drop]
                for name in ("mean", "var", "scale", "shift"):
                    model.weights[node_id][name] = model.weights[node_id][name][keep_rows].copy()
            continue
        _adjust_consumer(model, node_id, refs, unit, affines)

    # producer rows last: row indices are untouched by column surgery
    for lid in unit.group:
        rec = unit.records[lid]
        ws = model.weights[lid]
        ws["weight"] = ws["weight"][rec.keep].copy()
        if "bias" in ws:
            ws["bias"] = ws["bias"][rec.keep].copy()


def _adjust_consumer(model: ModelGraph, node_id: str, refs, unit: PruneUnit, affines):
    ws = model.weights[node_id]
    w = ws["weight"].astype(np.float64)
    bias_delta = np.zeros(w.shape[0], dtype=np.float64)
    drop_cols: set[int] = set()

    for ref, owner in refs:
        rec = unit.records[owner]
        cmap = ref.channel_map
        for x in rec.assignment:
            if x not in cmap:
                raise ConfigError(f"consumer {node_id}: channel map lacks index {x}")
            drop_cols.add(cmap[x])
        if rec.no_adjust:
            continue
        alpha, beta = affines[owner]
        coeffs, shifts = _fold_coefficients(rec, alpha, beta)
        # spatial sum of a slice: (n_out, kh, kw) -> (n_out,); linear slices
        # are already (n_out,)
        spatial_axes = tuple(range(1, w.ndim - 1))
        for x in sorted(rec.assignment):
            c = rec.assignment[x]
            slice_x = w[:, cmap[x]]
            if c == DROP:
                v = rec.dead_values.get(x, 0.0)
                if v:
                    bias_delta += v * (slice_x.sum(axis=spatial_axes) if spatial_axes else slice_x)
                continue
            w[:, cmap[c]] += coeffs[x] * slice_x
            if shifts[x]:
                bias_delta += shifts[x] * (slice_x.sum(axis=spatial_axes) if spatial_axes else slice_x)

    keep_cols = [t for t in range(w.shape[1]) if t not in drop_cols]
    ws["weight"] = w[:, keep_cols].astype(np.float32)
    if np.any(bias_delta):
        if "bias" in ws:
            ws["bias"] = (ws["bias"].astype(np.float64) + bias_delta).astype(np.float32)
        else:
            # bias-free conv: absorbing the shift into the following
            # batchnorm's running mean is exact and adds no parameters
            bn_id = _following_bn(model, node_id)
            if bn_id is not None:
                mean = model.weights[bn_id]["mean"].astype(np.float64)
                model.weights[bn_id]["mean"] = (mean - bias_delta).astype(np.float32)
            else:
                ws["bias"] = bias_delta.astype(np.float32)


def apply_plan(model: ModelGraph, plan: PruningPlan, probe_batch=None) -> ModelGraph:
    """Apply a plan to a model, returning a new pruned model.

    The input model is never mutated; any failure (including the closing
    dry forward pass) raises and leaves no partial result.
    """
    work = model.copy()
    for unit in plan.units:
        for lid in unit.group:
            if not work.has_node(lid) or work.node(lid).kind != "conv":
                raise UnsupportedTopologyError(f"plan names non-conv layer {lid!r}", node_id=lid)
            n_filters = work.weights[lid]["weight"].shape[0]
            rec = unit.records[lid]
            covered = sorted(set(rec.keep) | set(rec.assignment))
            if covered != list(range(n_filters)):
                raise ConfigError(
                    f"plan for {lid} covers {len(covered)} of {n_filters} filters")
        _apply_unit(work, unit)
    work.validate()
    if probe_batch is None:
        probe_batch = np.ones((1,) + work.input_shape, dtype=np.float32)
    forward_capture(work, probe_batch)  # dry run: shape errors surface here
    return work


def predicted_counts(model: ModelGraph, plan: PruningPlan) -> tuple[int, int]:
    """Closed-form FLOPs/params of the pruned model from kept-filter sizes.

    Spatial dimensions are unchanged by channel pruning, so they come from
    the original model's shape inference.
    """
    shapes = model.infer_shapes()
    keeps = {lid: len(plan.record_for(lid).keep) for lid in plan.layer_ids()}
    ch = {model.input_id: model.input_shape[0]}
    flops = params = 0
    for nid in model.topo_order():
        node = model.node(nid)
        ins = [ch[i] for i in node.inputs]
        if node.kind == "conv":
            w = model.weights[nid]["weight"]
            out_ch = keeps.get(nid, w.shape[0])
            kh, kw = w.shape[2], w.shape[3]
            _, h_out, w_out = shapes[nid]
            params += out_ch * ins[0] * kh * kw
            if "bias" in model.weights[nid]:
                params += out_ch
            flops += out_ch * ins[0] * kh * kw * h_out * w_out
            ch[nid] = out_ch
        elif node.kind == "batchnorm":
            params += 2 * ins[0]
            ch[nid] = ins[0]
        elif node.kind == "linear":
            w = model.weights[nid]["weight"]
            params += w.shape[0] * ins[0]
            if "bias" in model.weights[nid]:
                params += w.shape[0]
            flops += w.shape[0] * ins[0]
            ch[nid] = w.shape[0]
        elif node.kind == "concat":
            ch[nid] = sum(ins)
        else:
            ch[nid] = ins[0]
    return int(flops), int(params)


# -- end-to-end pipeline -------------------------------------------------------


def normalize_schedule(model: ModelGraph, rate_schedule) -> dict[str, float]:
    conv_ids = model.conv_ids()
    if isinstance(rate_schedule, (int, float)):
        rates = {cid: float(rate_schedule) for cid in conv_ids}
    else:
        rates = {cid: float(rate_schedule[cid]) for cid in conv_ids if cid in rate_schedule}
        missing = [cid for cid in conv_ids if cid not in rates]
        if missing:
            raise ConfigError(f"rate schedule missing conv layers: {missing}")
    for cid, lam in rates.items():
        if not (0.0 <= lam < 1.0):
            raise ConfigError(f"rate for {cid} must be in [0, 1), got {lam}")
    return rates


def prune_model(model: ModelGraph, calibration, rate_schedule, strategy="cf",
                seed=0, edge_mode="positive", chunk_size=16, probes=None, theta=None):
    """Prune every conv layer, unit by unit in topological order.

    Similarity for each unit is estimated on the already-pruned model, the
    per-layer rate turns into a threshold with an exact keep budget, the
    coupling group is reconciled, and the unit is applied before the next
    one is measured.  A fixed `theta` bypasses the threshold search (keep
    counts then depend on the graph rather than the rate).  No fine-tuning
    happens anywhere; the report's error metrics quantify the raw surgery.

    Returns (pruned_model, plan, report).
    """
    from .evaluation import ablation_select, build_report

    calibration = np.asarray(calibration, dtype=np.float32)
    if calibration.ndim != 4 or calibration.shape[0] < 2:
        raise ConfigError("calibration must be (n >= 2, c, h, w)")
    rates = normalize_schedule(model, rate_schedule)
    topo_pos = {nid: i for i, nid in enumerate(model.topo_order())}
    unit_groups = sorted(coupling_groups(model), key=lambda g: min(topo_pos[m] for m in g))

    current = model.copy()
    all_units: list[PruneUnit] = []
    reconciliations: list[dict] = []
    no_adjust = strategy == "cf_no_adjust"

    for group in unit_groups:
        members = sorted(group, key=lambda m: topo_pos[m])
        assignments, sims = {}, {}
        group_rate = max(rates[m] for m in members)
        for m in members:
            if group_rate == 0.0 and theta is None:
                # nothing to prune in this unit; no estimation needed
                n = current.weights[m]["weight"].shape[0]
                assignments[m] = CentralAssignment(m, list(range(n)), {}, {}, {}, theta=1.0)
                continue
            tap = member_tap(current, m)
            if tap is None:
                raise UnsupportedTopologyError(
                    f"conv {m} has no sampled relu to estimate similarity on", node_id=m)
            S = average_similarity(current, calibration, tap, chunk_size=chunk_size)
            sims[m] = S
            assignments[m] = ablation_select(S, strategy=strategy, lam=rates[m],
                                             seed=seed, edge_mode=edge_mode, theta=theta)
        piece = reconcile_coupling(assignments, [frozenset(members)], rates, sims,
                                   no_adjust=no_adjust)
        piece.units[0].group = members  # topo member order for deterministic apply
        _apply_unit(current, piece.units[0])
        all_units.extend(piece.units)
        reconciliations.extend(piece.reconciliations)

    current.validate()
    forward_capture(current, np.ones((1,) + current.input_shape, dtype=np.float32))

    plan = PruningPlan(
        all_units,
        reconciliations,
        provenance={
            "seed": int(seed),
            "sample_count": int(calibration.shape[0]),
            "strategy": strategy,
            "edge_mode": edge_mode,
            "rates": {lid: rates[lid] for lid in sorted(rates)},
            "fine_tuning": "skipped (out of scope)",
        },
    )
    probe_batch = probes if probes is not None else calibration[: min(64, calibration.shape[0])]
    report = build_report(model, current, plan, probe_batch, strategy=strategy)
    return current, plan, report
