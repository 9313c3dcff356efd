"""Command line entry points.

Subcommands: ``calibrate`` (shift profile -> pruning schedule), ``select``
(run a schedule against a trace), ``simulate`` (toy-transformer strategy
comparison), ``cost`` (FLOPs / KV-cache accounting), ``oracle``
(verification suites).  Exit codes: 0 success, 1 validation problem,
2 IO or format problem, 3 oracle suite failure.  All outputs are
deterministic and embed the resolved configuration.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np

from .calibration import (
    DEFAULT_CALIBRATION_SIZE,
    DEFAULT_TAU,
    aggregate_profiles,
    build_schedule,
    select_pruning_layers,
    shift_profile,
)
from .costs import ModelDims, schedule_flops
from .diversity import SEED_RULES, SEMANTIC_METRICS, SPATIAL_METRICS, DiversityConfig
from .errors import TraceError, ValidationError
from .oracles import mmdp_suite, roundtrip_suite, single_layer_suite
from .selector import ScheduleDriver, run_schedule, trace_stage_provider
from .toymodel import (
    DISTANCE_METRICS,
    VALUE_NORM_MODES,
    ToyConfig,
    forward,
    init_weights,
    layer_output_distance,
)
from .trace import PruningSchedule, TokenLayout, read_trace

LAMBDA_PRESETS = {
    "llava7b": (0.6, 0.8, 1.0),
    "llava13b": (0.6, 0.8, 1.0),
    "llava16-13b": (0.4, 0.7, 1.0),
    "qwen25vl7b": (0.2, 0.5, 0.8, 1.0),
}


class _Parser(argparse.ArgumentParser):
    # route usage problems through the validation exit code instead of
    # argparse's hard sys.exit
    def error(self, message):
        raise ValidationError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError as exc:
        raise ValidationError(f"expected a comma-separated float list, got {text!r}") from exc


def _parse_lambdas(text: str) -> list[float]:
    if text in LAMBDA_PRESETS:
        return list(LAMBDA_PRESETS[text])
    return _float_list(text)


def _parse_layout(text: str) -> TokenLayout:
    parts = text.split(",")
    if len(parts) != 5:
        raise ValidationError(
            "layout must be n_system,n_image,n_text,grid_rows,grid_cols"
        )
    try:
        nums = [int(p) for p in parts]
    except ValueError as exc:
        raise ValidationError(f"layout fields must be integers, got {text!r}") from exc
    return TokenLayout(*nums)


def _load_schedule(path: str) -> PruningSchedule:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}: malformed schedule JSON: {exc}") from exc
    return PruningSchedule.from_json_dict(obj)


def _thread_count(n_jobs: int) -> int:
    raw = os.environ.get("BTP_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ValidationError(f"BTP_THREADS must be an integer, got {raw!r}") from exc
        if cap < 1:
            raise ValidationError(f"BTP_THREADS must be >= 1, got {cap}")
    else:
        cap = 1
    return max(1, min(cap, n_jobs))


def _dump_json(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


# ---------------------------------------------------------------------------
# calibrate


def _profile_one_trace(trace_dir: str, tau: float):
    manifest, tensors = read_trace(trace_dir)
    layers = []
    for name in tensors:
        if name.startswith("hidden_l"):
            try:
                layers.append(int(name[len("hidden_l"):]))
            except ValueError as exc:
                raise ValidationError(f"tensor name {name!r} is not hidden_l<i>") from exc
    if not layers:
        raise ValidationError(f"{trace_dir}: no hidden_l<i> tensors in trace")
    layers.sort()
    if layers != list(range(len(layers))):
        raise ValidationError(
            f"{trace_dir}: hidden snapshots must be contiguous from 0, got {layers}"
        )
    layout = manifest.layout
    mats = []
    for l in layers:
        mat = tensors[f"hidden_l{l}"].view()
        if mat.ndim != 2:
            raise ValidationError(f"{trace_dir}: hidden_l{l} is not a matrix")
        if mat.shape[0] == layout.total():
            mat = mat[layout.image_slice]
        elif mat.shape[0] != layout.n_image:
            raise ValidationError(
                f"{trace_dir}: hidden_l{l} has {mat.shape[0]} rows, want "
                f"{layout.n_image} or {layout.total()}"
            )
        mats.append(mat)
    return shift_profile(np.stack(mats), tau=tau)


def cmd_calibrate(args) -> int:
    traces = list(args.traces)[: args.calib_size]
    if not traces:
        raise ValidationError("no calibration traces given")
    balances = _parse_lambdas(args.lambdas)
    retentions = _float_list(args.retentions)
    if len(retentions) == 1 and len(balances) > 1:
        retentions = retentions * len(balances)
    if len(retentions) != len(balances):
        raise ValidationError(
            f"{len(retentions)} retentions for {len(balances)} lambda values"
        )
    num_stages = args.num_stages or len(balances)
    if num_stages != len(balances):
        raise ValidationError(
            f"--num-stages {num_stages} does not match {len(balances)} lambda values"
        )

    workers = _thread_count(len(traces))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            profiles = list(pool.map(lambda t: _profile_one_trace(t, args.tau), traces))
    else:
        profiles = [_profile_one_trace(t, args.tau) for t in traces]
    profile = aggregate_profiles(profiles)

    selection = select_pruning_layers(profile, num_stages, min_gap=args.min_gap)
    schedule = build_schedule(selection.layers, retentions, balances, profile.num_layers)

    print(f"shift profile over {len(traces)} trace(s), tau={args.tau}")
    print("layer  shifted")
    for entry in profile.per_layer:
        marker = " <- prune next layer" if entry.layer + 1 in selection.layers else ""
        print(f"{entry.layer:>5}  {entry.shifted_count:>7}{marker}")
    print(f"pruning layers: {list(selection.layers)}")

    payload = schedule.to_json_dict()
    payload["profile"] = [
        {"layer": e.layer, "shifted_count": e.shifted_count} for e in profile.per_layer
    ]
    payload["fallback"] = selection.fallback
    payload["config"] = {
        "command": "calibrate",
        "traces": traces,
        "tau": args.tau,
        "num_stages": num_stages,
        "retentions": retentions,
        "lambdas": balances,
        "min_gap": args.min_gap,
        "calib_size": args.calib_size,
    }
    _dump_json(payload, args.out)
    if selection.fallback:
        print(
            "warning: flat shift profile, fell back to even subdivision",
            file=sys.stderr,
        )
        return 1
    return 0


# ---------------------------------------------------------------------------
# select


def cmd_select(args) -> int:
    manifest, tensors = read_trace(args.trace)
    schedule = _load_schedule(args.schedule)
    if schedule.num_layers != manifest.model_dims.layers:
        raise ValidationError(
            f"schedule covers {schedule.num_layers} layers, trace says "
            f"{manifest.model_dims.layers}"
        )
    cfg = DiversityConfig(
        spatial_metric=args.spatial_metric,
        semantic_metric=args.semantic_metric,
        seed_rule=args.seed_rule,
    )
    provider = trace_stage_provider(manifest, tensors)
    result = run_schedule(provider, schedule, cfg)

    print("layer  kept  attn_mass  min_dist   sum_dist")
    for stage in result.per_stage:
        d = stage.diagnostics
        print(
            f"{stage.layer:>5}  {len(stage.kept_indices):>4}  "
            f"{d['attention_mass']:>9.4f}  {d['min_pairwise_distance']:>8.4f}  "
            f"{d['sum_of_distances']:>9.3f}"
        )

    payload = result.to_json_dict()
    payload["config"] = {
        "command": "select",
        "trace": args.trace,
        "schedule": args.schedule,
        "spatial_metric": cfg.spatial_metric,
        "semantic_metric": cfg.semantic_metric,
        "seed_rule": cfg.seed_rule,
    }
    _dump_json(payload, args.out)
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    layout = _parse_layout(args.layout)
    if layout.n_text < 1:
        raise ValidationError("simulate needs at least one text token to compare on")
    cfg = ToyConfig(
        num_layers=args.layers,
        d=args.d,
        heads=args.heads,
        mlp=args.mlp,
        seed=args.seed,
        value_norm=args.value_norm,
    )
    schedule = _load_schedule(args.schedule)
    if schedule.num_layers != cfg.num_layers:
        raise ValidationError(
            f"schedule covers {schedule.num_layers} layers, model has {cfg.num_layers}"
        )
    dcfg = DiversityConfig(
        spatial_metric=args.spatial_metric,
        semantic_metric=args.semantic_metric,
        seed_rule=args.seed_rule,
    )

    weights = init_weights(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    inputs = rng.standard_normal((layout.total(), cfg.d)).astype(np.float32)
    baseline = forward(inputs, layout, cfg, weights)

    def variant(balance: float | None) -> PruningSchedule:
        if balance is None:
            return schedule
        stages = tuple(
            type(s)(layer=s.layer, retention=s.retention, balance=balance)
            for s in schedule.stages
        )
        return PruningSchedule(stages=stages, num_layers=schedule.num_layers)

    strategies = {
        "btp": variant(None),
        "attention_only": variant(1.0),
        "diversity_only": variant(0.0),
    }
    records = {}
    for name, sched in strategies.items():
        driver = ScheduleDriver(sched, dcfg)
        records[name] = forward(inputs, layout, cfg, weights, prune_hook=driver)

    text_positions = list(range(layout.n_system + layout.n_image, layout.total()))
    lines = ["layer," + ",".join(strategies)]
    for layer in range(1, cfg.num_layers + 1):
        row = [str(layer)]
        for name in strategies:
            row.append(
                _fmt(
                    layer_output_distance(
                        baseline, records[name], layer, text_positions, metric=args.metric
                    )
                )
            )
        lines.append(",".join(row))
    csv_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)

    config = {
        "command": "simulate",
        "schedule": args.schedule,
        "layout": args.layout,
        "layers": cfg.num_layers,
        "d": cfg.d,
        "heads": cfg.heads,
        "mlp": cfg.mlp,
        "seed": cfg.seed,
        "value_norm": cfg.value_norm,
        "metric": args.metric,
        "spatial_metric": dcfg.spatial_metric,
        "semantic_metric": dcfg.semantic_metric,
        "seed_rule": dcfg.seed_rule,
        "out": args.out,
    }
    print("config: " + json.dumps(config))
    return 0


# ---------------------------------------------------------------------------
# cost


def cmd_cost(args) -> int:
    layout = _parse_layout(args.layout)
    if args.schedule:
        schedule = _load_schedule(args.schedule)
    else:
        if not args.num_layers:
            raise ValidationError("--num-layers is required when no schedule is given")
        schedule = PruningSchedule(stages=(), num_layers=args.num_layers)
    dims = ModelDims(
        num_layers=schedule.num_layers,
        d=args.d,
        m=args.mlp,
        kv_bytes_per_elem=args.kv_bytes,
    )
    report = schedule_flops(layout, schedule, dims)
    payload = report.to_json_dict()
    payload["config"] = {
        "command": "cost",
        "layout": args.layout,
        "schedule": args.schedule,
        "d": args.d,
        "mlp": args.mlp,
        "num_layers": schedule.num_layers,
        "kv_bytes": args.kv_bytes,
    }
    _dump_json(payload, args.out)
    return 0


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    if args.kind == "mmdp":
        report = mmdp_suite(
            instances=args.instances or 50,
            seed=args.seed,
            max_n=args.max_n,
            max_k=args.max_k,
            guard=args.guard,
        )
    elif args.kind == "single_layer":
        report = single_layer_suite(instances=args.instances or 20, seed=args.seed)
    else:
        report = roundtrip_suite(instances=args.instances or 100, seed=args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.ok else 3


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="btp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="build a pruning schedule from traces")
    cal.add_argument("traces", nargs="+", help="trace directories with hidden_l<i> tensors")
    cal.add_argument("--tau", type=float, default=DEFAULT_TAU)
    cal.add_argument("--num-stages", type=int, default=0,
                     help="defaults to the number of lambda values")
    cal.add_argument("--retentions", default="0.5",
                     help="comma list; a single value repeats per stage")
    cal.add_argument("--lambdas", default="llava7b",
                     help=f"comma list or preset: {', '.join(sorted(LAMBDA_PRESETS))}")
    cal.add_argument("--min-gap", type=int, default=1)
    cal.add_argument("--calib-size", type=int, default=DEFAULT_CALIBRATION_SIZE,
                     help="use at most this many traces")
    cal.add_argument("--out", default=None, help="schedule JSON path (default stdout)")
    cal.set_defaults(func=cmd_calibrate)

    sel = sub.add_parser("select", help="run a schedule against a trace")
    sel.add_argument("--trace", required=True)
    sel.add_argument("--schedule", required=True)
    sel.add_argument("--spatial-metric", choices=SPATIAL_METRICS, default="manhattan")
    sel.add_argument("--semantic-metric", choices=SEMANTIC_METRICS, default="cosine_distance")
    sel.add_argument("--seed-rule", choices=SEED_RULES, default="farthest_from_centroid")
    sel.add_argument("--out", default=None, help="selection JSON path (default stdout)")
    sel.set_defaults(func=cmd_select)

    sim = sub.add_parser("simulate", help="toy-model strategy comparison")
    sim.add_argument("--schedule", required=True)
    sim.add_argument("--layout", default="2,16,6,4,4",
                     help="n_system,n_image,n_text,grid_rows,grid_cols")
    sim.add_argument("--layers", type=int, default=4)
    sim.add_argument("--d", type=int, default=32)
    sim.add_argument("--heads", type=int, default=4)
    sim.add_argument("--mlp", type=int, default=64)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--value-norm", choices=VALUE_NORM_MODES, default="raw")
    sim.add_argument("--metric", choices=DISTANCE_METRICS, default="cosine_similarity")
    sim.add_argument("--spatial-metric", choices=SPATIAL_METRICS, default="manhattan")
    sim.add_argument("--semantic-metric", choices=SEMANTIC_METRICS, default="cosine_distance")
    sim.add_argument("--seed-rule", choices=SEED_RULES, default="farthest_from_centroid")
    sim.add_argument("--out", default=None, help="CSV path (default stdout)")
    sim.set_defaults(func=cmd_simulate)

    cost = sub.add_parser("cost", help="FLOPs and KV-cache accounting")
    cost.add_argument("--layout", required=True,
                      help="n_system,n_image,n_text,grid_rows,grid_cols")
    cost.add_argument("--schedule", default=None, help="omit for the unpruned model")
    cost.add_argument("--num-layers", type=int, default=0)
    cost.add_argument("--d", type=int, required=True)
    cost.add_argument("--mlp", type=int, required=True)
    cost.add_argument("--kv-bytes", type=int, default=2)
    cost.add_argument("--out", default=None, help="report JSON path (default stdout)")
    cost.set_defaults(func=cmd_cost)

    orc = sub.add_parser("oracle", help="run a verification suite")
    orc.add_argument("kind", choices=("mmdp", "single_layer", "roundtrip"))
    orc.add_argument("--instances", type=int, default=0, help="0 = suite default")
    orc.add_argument("--seed", type=int, default=2024)
    orc.add_argument("--max-n", type=int, default=12)
    orc.add_argument("--max-k", type=int, default=5)
    orc.add_argument("--guard", type=int, default=1_000_000)
    orc.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TraceError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
