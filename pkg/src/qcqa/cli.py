"""Command-line entry point: ``qcqa <subcommand> ...``.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .attnsim import divergence, synth_layer
from .core import LayerGrouping, ModelPlan, gqa_baseline
from .errors import ConfigError, QcqaError
from .io import (
    FRONT_HEADER,
    MAGIC,
    PLAN_FORMAT_VERSION,
    FrontRow,
    PlanFile,
    PlanRecord,
    apply_plan,
    convert_projections,
    load_archive,
    load_plan,
    save_archive,
    save_front,
    save_plan,
)
from .kvcache import layer_kv_fraction, model_kv_fraction
from .oracle import PARTITION_BUDGET, exact_pareto, exact_plan_front, pareto_filter
from .search import (
    PERCENTILES,
    collate_percentiles,
    plan_from_bits,
    plan_sort_key,
    qcqa_groups,
    qcqa_select_layers,
    select_layers_all_buckets,
)
from .wse import layer_wse, merge_sweep, model_wse

log = logging.getLogger("qcqa")

BUCKETS = {f"p{p}": p for p in PERCENTILES}


@dataclass
class RunConfig:
    subcommand: str
    out: str
    checkpoint: str | None = None
    max_groups: int | None = None
    encoding: str = "ac"
    pop_size1: int = 64
    ngen1: int = 200
    pop_size2: int = 64
    ngen2: int = 100
    bucket: str = "all"
    seed: int = 42
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    k_weight: float = 1.0
    v_weight: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def weights(self) -> tuple[float, float]:
        return (self.k_weight, self.v_weight)

    def check(self) -> None:
        for name in ("pop_size1", "ngen1", "pop_size2", "ngen2", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"--{name.replace('_', '-')} must be positive")
        for name in ("pop_size1", "pop_size2"):
            v = getattr(self, name)
            if v < 4 or v % 2:
                raise ConfigError(f"--{name.replace('_', '-')} must be even and >= 4, got {v}")
        if self.max_groups is not None and self.max_groups < 1:
            raise ConfigError("--max-groups must be positive")
        if self.bucket != "all" and self.bucket not in BUCKETS:
            raise ConfigError(f"--bucket must be one of {sorted(BUCKETS)} or 'all'")
        if self.k_weight < 0 or self.v_weight < 0:
            raise ConfigError("term weights must be non-negative")


# ---------------------------------------------------------------- helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(cfg: RunConfig, out: Path, started: float, outputs: list[str], **info) -> None:
    manifest = {
        "command": cfg.subcommand,
        "package_version": __version__,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "formats": {
            "archive": MAGIC.decode(),
            "plan_version": PLAN_FORMAT_VERSION,
            "front_header": ",".join(FRONT_HEADER),
        },
        "outputs": outputs,
        "wall_time_s": round(time.perf_counter() - started, 3),
        **info,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_front_and_plans(out: Path, entries, H: int, nlayers: int, encoding: str) -> list[str]:
    """``entries`` are ``(kv, wse, ModelPlan)`` triples already on one front."""
    entries = sorted(entries, key=lambda e: (e[0], e[1], plan_sort_key(e[2])))
    plans = PlanFile(H, nlayers, encoding, [PlanRecord(p, w, kv) for kv, w, p in entries])
    save_plan(plans, out / "plans.json")
    save_front([FrontRow(kv, w, i) for i, (kv, w, _) in enumerate(entries)], out / "front.csv")
    return ["front.csv", "plans.json"]


def _layer_fronts_json(fronts) -> list:
    return [
        [{"kv_fraction": e.kv_fraction, "wse": e.wse, "groups": e.item.as_lists()} for e in front]
        for front in fronts
    ]


def _buckets_json(buckets) -> dict:
    return {f"p{p}": [g.as_lists() for g in buckets[p]] for p in PERCENTILES}


def _load_uniform(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    archive = load_archive(cfg.checkpoint)
    H = archive.heads_per_layer
    if cfg.max_groups is not None:
        if cfg.max_groups > H:
            raise ConfigError(f"--max-groups {cfg.max_groups} exceeds H={H}")
        if cfg.encoding == "ec" and H % cfg.max_groups:
            raise ConfigError(f"--encoding ec needs max-groups dividing H={H}, got {cfg.max_groups}")
    return archive, H


# ---------------------------------------------------------------- commands


def cmd_search(cfg: RunConfig) -> int:
    started = time.perf_counter()
    if cfg.max_groups is None:
        raise ConfigError("--max-groups is required")
    archive, H = _load_uniform(cfg)
    out = _out_dir(cfg)
    buckets = qcqa_groups(
        archive,
        cfg.max_groups,
        cfg.encoding,
        cfg.pop_size1,
        cfg.ngen1,
        cfg.seed,
        weights=cfg.weights,
        threads=cfg.threads,
    )
    kwargs = dict(weights=cfg.weights, threads=1)
    if cfg.bucket == "all":
        front = select_layers_all_buckets(archive, buckets, cfg.pop_size2, cfg.ngen2, cfg.seed, **kwargs)
    else:
        front = qcqa_select_layers(
            archive, buckets, BUCKETS[cfg.bucket], cfg.pop_size2, cfg.ngen2, cfg.seed, **kwargs
        )
    outputs = _write_front_and_plans(
        out, [(e.kv_fraction, e.wse, e.item) for e in front], H, archive.layer_count, cfg.encoding
    )
    (out / "groups.json").write_text(
        json.dumps(
            {"buckets": _buckets_json(buckets), "layer_fronts": _layer_fronts_json(buckets.layer_fronts)},
            indent=1,
        )
        + "\n"
    )
    outputs.append("groups.json")
    _write_manifest(cfg, out, started, outputs, front_size=len(front))
    log.info("search: %d plans on the front, written to %s", len(front), out)
    return 0


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def cmd_gqa(cfg: RunConfig) -> int:
    started = time.perf_counter()
    archive, H = _load_uniform(cfg)
    out = _out_dir(cfg)
    if cfg.extra.get("sweep"):
        sizes = _divisors(H)
    elif cfg.max_groups is not None:
        sizes = [cfg.max_groups]
    else:
        raise ConfigError("gqa needs --max-groups or --sweep")
    points = []
    for P in sizes:
        plan = ModelPlan.uniform(gqa_baseline(H, P), archive.layer_count)
        points.append((model_kv_fraction(plan, H), model_wse(archive, plan, cfg.weights), plan))
    front = pareto_filter(points)
    if len(front) < len(points):
        log.warning("gqa: %d of %d requested points are dominated and omitted", len(points) - len(front), len(points))
    outputs = _write_front_and_plans(out, front, H, archive.layer_count, "gqa")
    _write_manifest(
        cfg,
        out,
        started,
        outputs,
        points=[{"groups": P, "kv_fraction": kv, "wse": w} for P, (kv, w, _) in zip(sizes, points)],
    )
    return 0


def cmd_oracle(cfg: RunConfig) -> int:
    started = time.perf_counter()
    if cfg.max_groups is None:
        raise ConfigError("--max-groups is required")
    archive, H = _load_uniform(cfg)
    out = _out_dir(cfg)
    budget = int(cfg.extra.get("budget") or PARTITION_BUDGET)
    fronts = [exact_pareto(layer, cfg.max_groups, cfg.weights, budget) for layer in archive.layers]
    buckets = collate_percentiles(fronts)
    chosen = PERCENTILES if cfg.bucket == "all" else (BUCKETS[cfg.bucket],)
    unique = {}
    for p in chosen:
        groupings = buckets[p]
        values = [(g.num_groups, layer_wse(l, g, cfg.weights)) for l, g in zip(archive.layers, groupings)]
        for e in exact_plan_front(values, H):
            plan = plan_from_bits(e.item, groupings)
            unique.setdefault(plan_sort_key(plan), (e.kv_fraction, e.wse, plan))
    front = pareto_filter(unique.values())
    outputs = _write_front_and_plans(out, front, H, archive.layer_count, "oracle")
    (out / "groups.json").write_text(
        json.dumps({"buckets": _buckets_json(buckets), "layer_fronts": _layer_fronts_json(fronts)}, indent=1) + "\n"
    )
    outputs.append("groups.json")
    _write_manifest(cfg, out, started, outputs, front_size=len(front))
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    started = time.perf_counter()
    out = _out_dir(cfg)
    x = cfg.extra
    H, T, d, dm = x["heads"], x["tokens"], x["head_dim"], x["d_model"]
    samples, min_groups = x["samples"], x["min_groups"]
    if not 1 <= min_groups <= H:
        raise ConfigError(f"--min-groups must be in [1, {H}]")
    if samples < 2:
        raise ConfigError("--samples must be >= 2")
    synth = synth_layer(H, T, d, dm, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 3])
    rows = []
    for s in range(samples):
        k = int(rng.integers(min_groups, H + 1))
        if k == H:
            g = LayerGrouping.singletons(H)
        else:
            g = LayerGrouping.from_labels(rng.integers(0, k, size=H))
        rows.append(
            (s, g.num_groups, layer_kv_fraction(g, H), layer_wse(synth.weights, g, cfg.weights), divergence(synth.inputs, g), str(g))
        )
    wse_col = np.array([r[3] for r in rows])
    div_col = np.array([r[4] for r in rows])
    if np.ptp(wse_col) == 0 or np.ptp(div_col) == 0:
        spearman = None
    else:
        spearman = float(spearmanr(wse_col, div_col).statistic)
    sweep = merge_sweep(synth.weights, cfg.weights)
    sweep_w = [w for _, w, _ in sweep]
    monotone = all(b <= a for a, b in zip(sweep_w, sweep_w[1:]))

    with open(out / "validation.csv", "w") as f:
        f.write("sample,num_groups,kv_fraction,wse,divergence,grouping\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]},{r[2]:.17g},{r[3]:.17g},{r[4]:.17g},\"{r[5]}\"\n")
    with open(out / "sweep.csv", "w") as f:
        f.write("num_groups,kv_fraction,wse,grouping\n")
        for k, w, g in sweep:
            f.write(f"{k},{k / H:.17g},{w:.17g},\"{g}\"\n")
    report = {
        "heads": H,
        "tokens": T,
        "head_dim": d,
        "d_model": dm,
        "samples": samples,
        "spearman_wse_divergence": spearman if spearman is not None else "degenerate",
        "sweep_monotone_nonincreasing": monotone,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_manifest(cfg, out, started, ["validation.csv", "sweep.csv", "report.json"])
    if spearman is None:
        log.info("validate: correlation degenerate (constant column)")
    else:
        log.info("validate: Spearman(WSE, divergence) = %.4f", spearman)
    return 0


def cmd_apply(cfg: RunConfig) -> int:
    started = time.perf_counter()
    archive, H = _load_uniform(cfg)
    out = _out_dir(cfg)
    plans = load_plan(cfg.extra["plans"])
    pid = cfg.extra["plan_id"]
    if not 0 <= pid < len(plans.plans):
        raise ConfigError(f"--plan-id {pid} out of range (file has {len(plans.plans)} plans)")
    plan = plans.plans[pid].plan
    grouped = apply_plan(archive, plan)
    save_archive(grouped, out / "grouped.qkv", cfg.extra.get("dtype", "f64"))
    retained = sum(grouped.head_counts)
    _write_manifest(
        cfg,
        out,
        started,
        ["grouped.qkv"],
        kv_fraction=retained / (H * archive.layer_count),
        head_counts=list(grouped.head_counts),
    )
    return 0


def cmd_convert(cfg: RunConfig) -> int:
    started = time.perf_counter()
    out = _out_dir(cfg)
    src = cfg.extra["input"]
    with np.load(src) as z:
        tensors = {k: z[k] for k in z.files}
    archive = convert_projections(tensors, cfg.extra["heads"])
    save_archive(archive, out / "archive.qkv", cfg.extra.get("dtype", "f64"))
    _write_manifest(cfg, out, started, ["archive.qkv"], layers=archive.layer_count)
    return 0


COMMANDS = {
    "search": cmd_search,
    "gqa": cmd_gqa,
    "oracle": cmd_oracle,
    "validate": cmd_validate,
    "apply": cmd_apply,
    "convert": cmd_convert,
}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcqa", description="Search for grouped key/value attention head layouts."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--k-weight", "--kv-weight", dest="k_weight", type=float, default=1.0,
                        help="weight of the key term in WSE")
    common.add_argument("--v-weight", type=float, default=1.0, help="weight of the value term in WSE")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True, help="QKVWTS01 tensor archive")

    def add_search_flags(p, stage2=True):
        p.add_argument("--max-groups", type=int, required=True, help="at most this many groups per layer")
        p.add_argument("--bucket", default="all", choices=[*BUCKETS, "all"])
        if stage2:
            p.add_argument("--encoding", default="ac", choices=["ac", "ec"])
            p.add_argument("--pop-size1", type=int, default=64)
            p.add_argument("--ngen1", type=int, default=200)
            p.add_argument("--pop-size2", type=int, default=64)
            p.add_argument("--ngen2", type=int, default=100)

    p = sub.add_parser("search", parents=[common, ckpt], help="two-stage evolutionary search")
    add_search_flags(p)

    p = sub.add_parser("gqa", parents=[common, ckpt], help="consecutive-block GQA/MQA baseline")
    p.add_argument("--max-groups", type=int, help="number of groups P (must divide H)")
    p.add_argument("--sweep", action="store_true", help="emit every P dividing H")

    p = sub.add_parser("oracle", parents=[common, ckpt], help="exhaustive fronts for small models")
    add_search_flags(p, stage2=False)
    p.add_argument("--budget", type=int, default=PARTITION_BUDGET, help="max partitions per layer")

    p = sub.add_parser("validate", parents=[common], help="WSE vs attention-divergence check")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--min-groups", type=int, default=1, help="smallest group count sampled")

    p = sub.add_parser("apply", parents=[common, ckpt], help="mean-pool K/V heads per a plan")
    p.add_argument("--plans", required=True, help="plans.json from search/gqa/oracle")
    p.add_argument("--plan-id", type=int, required=True)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"])

    p = sub.add_parser("convert", parents=[common], help="fused k_proj/v_proj .npz -> archive")
    p.add_argument("--input", required=True, help=".npz with layers.<i>...k_proj / v_proj arrays")
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"])
    return parser


_CONFIG_FIELDS = {f for f in RunConfig.__dataclass_fields__}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    ns = vars(args).copy()
    ns.pop("verbose", None)
    known = {k: v for k, v in ns.items() if k in _CONFIG_FIELDS}
    extra = {k: v for k, v in ns.items() if k not in _CONFIG_FIELDS}
    cfg = RunConfig(**known, extra=extra)
    cfg.check()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.subcommand](cfg)
    except (QcqaError, OSError) as exc:
        print(f"qcqa {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
