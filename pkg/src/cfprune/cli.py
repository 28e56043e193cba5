"""Command-line entry point.

Subcommands: analyze, prune, eval, flops, demo.  All randomness is seeded
(a seed is mandatory), outputs are written into a temp directory and moved
into place per file, and CF_LOG controls verbosity.

Exit codes: 0 success, 2 configuration error, 3 data/model error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, figures
from .errors import CfpruneError, ConfigError
from .model import count_flops_params, load_model, member_tap, save_model
from .pruning import PruningPlan, prune_model
from .similarity import average_similarity_multi, stability_report
from .templates import build_duplicate_toy_net

log = logging.getLogger("cfprune")

CONFIG_VERSION = "cfconfig/1"


@dataclass
class RunConfig:
    model: str | None = None
    data: str | None = None
    samples: int = 128
    rate: float | None = None
    schedule: str | None = None
    strategy: str = "cf"
    theta_mode: str = "search"
    theta: float | None = None
    seed: int | None = None
    out: str = "cfprune-out"
    stability_counts: list[int] | None = None
    plan: str | None = None

    def validate(self):
        if self.seed is None:
            raise ConfigError("a seed is required (--seed or config key 'seed')")
        if self.samples < 2:
            raise ConfigError(f"sample count must be >= 2, got {self.samples}")
        if self.rate is not None and not (0.0 <= self.rate < 1.0):
            raise ConfigError(f"rate must be in [0, 1), got {self.rate}")
        if self.theta_mode not in ("search", "fixed"):
            raise ConfigError(f"theta-mode must be search or fixed, got {self.theta_mode!r}")
        if self.theta_mode == "fixed" and self.theta is None:
            raise ConfigError("theta-mode=fixed requires --theta")
        if self.strategy not in evaluation.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")


def _load_config_file(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if cfg.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    cfg.pop("version", None)
    return cfg


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        for key, value in file_cfg.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    # flags win over config keys
    for key in ("model", "data", "samples", "rate", "schedule", "strategy",
                "theta_mode", "theta", "seed", "out", "plan"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "stability_counts", None):
        cfg.stability_counts = [int(c) for c in args.stability_counts.split(",")]
    cfg.validate()
    return cfg


class _OutputStage:
    """Build outputs in a temp dir; publish each file atomically on success.

    The temp dir lives next to the final one so os.replace stays on one
    filesystem.
    """

    def __init__(self, final_dir):
        self.final = Path(final_dir)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".cfprune-", dir=self.final.parent))

    def path(self, *parts) -> Path:
        p = self.tmp.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self):
        for src in sorted(self.tmp.rglob("*")):
            if src.is_dir():
                continue
            dst = self.final / src.relative_to(self.tmp)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _load_rates(cfg: RunConfig):
    if cfg.schedule:
        raw = json.loads(Path(cfg.schedule).read_text())
        return raw.get("rates", raw)
    if cfg.rate is None:
        raise ConfigError("either --rate or --schedule is required")
    return cfg.rate


def _calibration(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("calibration data is required (--data)")
    return data_mod.load_calibration(cfg.data, count=cfg.samples, seed=cfg.seed)


# -- subcommands ---------------------------------------------------------------


def cmd_analyze(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    calibration = _calibration(cfg)
    taps = model.tap_ids()
    if not taps:
        raise ConfigError("model has no tap nodes to analyze")
    stage = _OutputStage(cfg.out)
    try:
        sims = average_similarity_multi(model, calibration, taps)
        for tap, S in sims.items():
            _dump_json(S.to_json_dict(), stage.path(f"similarity_{tap}.json"))
            with open(stage.path(f"similarity_{tap}.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["filter"] + list(range(S.n)))
                for i, row in enumerate(S.matrix):
                    writer.writerow([i] + [f"{v:.6f}" for v in row])
            figures.save_similarity_heatmap(S, stage.path("figures", f"similarity_{tap}.png"))
        if cfg.stability_counts:
            summary = {}
            for tap in taps:
                rep = stability_report(model, calibration, tap, cfg.stability_counts)
                summary[tap] = rep.to_json_dict()
                with open(stage.path(f"stability_{tap}.csv"), "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["pair"] + [str(c) for c in rep.sample_counts])
                    n = rep.values.shape[1]
                    iu = np.triu_indices(n, k=1)
                    for p, (a, b) in enumerate(zip(*iu)):
                        writer.writerow([f"{a}-{b}"] + [f"{rep.values[k][a, b]:.6f}"
                                                        for k in range(len(rep.sample_counts))])
                figures.save_stability_curves(rep, stage.path("figures", f"stability_{tap}.png"))
            _dump_json(summary, stage.path("stability.json"))
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    log.info("analyze outputs in %s", cfg.out)
    return 0


def cmd_prune(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    calibration = _calibration(cfg)
    rates = _load_rates(cfg)
    theta = cfg.theta if cfg.theta_mode == "fixed" else None
    pruned, plan, report = prune_model(model, calibration, rates, strategy=cfg.strategy,
                                       seed=cfg.seed, theta=theta)
    stage = _OutputStage(cfg.out)
    try:
        save_model(pruned, stage.tmp)
        stage.path("plan.json").write_text(plan.to_json())
        _dump_json(report.to_json_dict(), stage.path("report.json"))
        _write_report_csv(report, plan, stage.path("report.csv"))
        figures.save_report_figure(report, stage.path("figures", "report.png"))
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    print(report.table())
    return 0


def _write_report_csv(report, plan, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "rate", "theta", "kept", "pruned", "surrogate_cost"])
        for lid in plan.layer_ids():
            rec = plan.record_for(lid)
            writer.writerow([lid, f"{rec.rate:.4f}", f"{rec.theta:.6f}",
                             len(rec.keep), len(rec.assignment), f"{rec.surrogate_cost:.6f}"])
        writer.writerow([])
        writer.writerow(["flops_before", "flops_after", "params_before", "params_after",
                         "logit_error", "top1_agreement_proxy"])
        writer.writerow([report.flops_before, report.flops_after, report.params_before,
                         report.params_after, f"{report.logit_error:.8f}",
                         f"{report.top1_agreement:.6f}"])


def cmd_eval(cfg: RunConfig, original_path, pruned_path) -> int:
    original = load_model(original_path)
    pruned = load_model(pruned_path)
    keep_map = {}
    plan = None
    if cfg.plan:
        plan = PruningPlan.from_json_dict(json.loads(Path(cfg.plan).read_text()))
        for lid in plan.layer_ids():
            tap = member_tap(original, lid)
            if tap is not None:
                keep_map[tap] = plan.record_for(lid).keep
    probes = _calibration(cfg)
    taps = [t for t in original.tap_ids()
            if pruned.has_node(t) and (t in keep_map or
                                       original.infer_shapes()[t] == pruned.infer_shapes()[t])]
    tap_errors, lerr, agreement = evaluation.reconstruction_error(
        original, pruned, probes, taps, keep_map)
    fb, pb = count_flops_params(original)
    fa, pa = count_flops_params(pruned)
    report = evaluation.PrunedModelReport(
        strategy=cfg.strategy, flops_before=fb, flops_after=fa,
        params_before=pb, params_after=pa, tap_errors=tap_errors,
        logit_error=lerr, top1_agreement=agreement,
        surrogate_costs={lid: plan.record_for(lid).surrogate_cost
                         for lid in plan.layer_ids()} if plan else {},
        notes=["error/agreement metrics are training-free proxies, not accuracy"])

    result = {"primary": report.to_json_dict()}
    ablation = None
    if cfg.rate is not None or cfg.schedule:
        # ablation rerun: prune the original fresh under the named strategy
        rates = _load_rates(cfg)
        _, _, ablation = prune_model(original, probes, rates, strategy=cfg.strategy, seed=cfg.seed)
        result["ablation_rerun"] = ablation.to_json_dict()

    # similarity histograms at the first tap (before vs after pruning)
    first_tap = next(iter(original.tap_ids()), None)
    stage = _OutputStage(cfg.out)
    try:
        if first_tap is not None and pruned.has_node(first_tap):
            sims_o = average_similarity_multi(original, probes, [first_tap])
            sims_p = average_similarity_multi(pruned, probes, [first_tap])
            before, edges = evaluation.similarity_histogram(sims_o[first_tap], 0.1)
            after, _ = evaluation.similarity_histogram(sims_p[first_tap], 0.1)
            result["similarity_histogram"] = {
                "layer": first_tap,
                "bin_edges": [float(e) for e in edges],
                "before": [int(c) for c in before],
                "after": [int(c) for c in after],
            }
            figures.save_histogram_comparison(
                before, after, edges, stage.path("figures", "similarity_histogram.png"))
            with open(stage.path("similarity_histogram.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_start", "bin_end", "before", "after"])
                for i in range(len(before)):
                    writer.writerow([f"{edges[i]:.2f}", f"{edges[i + 1]:.2f}",
                                     int(before[i]), int(after[i])])
        _dump_json(result, stage.path("report.json"))
        figures.save_report_figure(report, stage.path("figures", "report.png"))
        stage.publish()
    except BaseException:
        stage.discard()
        raise
    print(report.table())
    if ablation is not None:
        print(f"ablation rerun [{cfg.strategy}]: logit_error={ablation.logit_error:.6g} "
              f"top1_agreement={ablation.top1_agreement:.4f}")
    return 0


def cmd_flops(args) -> int:
    model = load_model(args.model)
    flops, params = count_flops_params(model)
    print(f"flops  {flops} ({flops / 1e6:.2f}M)")
    print(f"params {params} ({params / 1e6:.2f}M)")
    if args.out:
        _dump_json({"flops": flops, "params": params}, args.out)
    return 0


def cmd_demo(args) -> int:
    """Build the duplicate-filter toy net, prune it, verify exactness."""
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or "cfprune-demo")
    channels = 8
    pairs = tuple((2 * i, 2 * i + 1) for i in range(channels // 2))
    net = build_duplicate_toy_net(seed=seed, channels=channels, dup_pairs=pairs)
    rng = np.random.default_rng(seed + 1)
    calibration = rng.random((16, 3, 8, 8), dtype=np.float32)
    probes = rng.random((64, 3, 8, 8), dtype=np.float32)
    rates = {"conv1": 0.5, "conv2": 0.0}

    pruned, plan, report = prune_model(net, calibration, rates, seed=seed, probes=probes)
    err = evaluation.logit_error(net, pruned, probes)
    pruned_n, _, _ = prune_model(net, calibration, rates, strategy="cf_no_adjust", seed=seed,
                                 probes=probes)
    err_n = evaluation.logit_error(net, pruned_n, probes)

    stage = _OutputStage(out)
    try:
        save_model(net, stage.tmp, manifest_name="original.json", blob_name="original.bin")
        save_model(pruned, stage.tmp)
        stage.path("plan.json").write_text(plan.to_json())
        _dump_json(report.to_json_dict(), stage.path("report.json"))
        figures.save_report_figure(report, stage.path("figures", "report.png"))
        stage.publish()
    except BaseException:
        stage.discard()
        raise

    ok = err <= 1e-4 and err_n > err
    print(f"duplicate-filter exactness: adjusted logit error {err:.3g} "
          f"(<= 1e-4: {'PASS' if err <= 1e-4 else 'FAIL'})")
    print(f"no-adjust comparison:       logit error {err_n:.3g} "
          f"(> adjusted: {'PASS' if err_n > err else 'FAIL'})")
    print(f"outputs in {out}")
    return 0 if ok else 1


# -- wiring ---------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON config file (flags win over keys)")
    p.add_argument("--model", help="path to model.json")
    p.add_argument("--data", help="calibration source: probes.json or CIFAR-10 binary dir")
    p.add_argument("--samples", type=int, help="calibration sample count (default 128)")
    p.add_argument("--rate", type=float, help="global compression rate in [0, 1)")
    p.add_argument("--schedule", help="JSON file with per-layer rates")
    p.add_argument("--strategy", choices=evaluation.STRATEGIES, help="selection strategy")
    p.add_argument("--theta-mode", dest="theta_mode", choices=("search", "fixed"))
    p.add_argument("--theta", type=float, help="threshold for --theta-mode fixed")
    p.add_argument("--seed", type=int, help="RNG seed (mandatory)")
    p.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfprune",
                                     description="Central-filter CNN pruning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="estimate per-layer similarity matrices")
    _add_common(p)
    p.add_argument("--stability-counts", help="comma list of sample counts, e.g. 16,32,64,128")

    p = sub.add_parser("prune", help="prune a model under a rate or schedule")
    _add_common(p)

    p = sub.add_parser("eval", help="compare an original and a pruned model")
    _add_common(p)
    p.add_argument("original", help="original model.json")
    p.add_argument("pruned", help="pruned model.json")
    p.add_argument("--plan", help="plan.json recording the channel correspondence")

    p = sub.add_parser("flops", help="count FLOPs and parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="optional JSON output path")

    p = sub.add_parser("demo", help="duplicate-filter toy net exactness check")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "flops":
            return cmd_flops(args)
        if args.command == "demo":
            return cmd_demo(args)
        cfg = build_config(args)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "prune":
            if not cfg.model:
                raise ConfigError("--model is required")
            return cmd_prune(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.original, args.pruned)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CfpruneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
