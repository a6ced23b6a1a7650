"""Config-driven experiment runner: gen, train, backfill, analyze.

One JSON config describes the synthetic world, both training stages, and
the backfill experiment matrix. Every run derives per-stage seeds from the
experiment seed, every output file embeds the config hash + seed, and all
writes are temp-then-rename, so reruns are byte-identical.

Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import (
    TrainConfig,
    load_alignnet,
    load_head,
    save_alignnet,
    save_head,
    train_alignment,
    train_head,
    transform,
)
from .backfill import (
    BackfillPlan,
    OrderingPolicy,
    kendall_tau,
    make_alpha_grid,
    make_ordering,
    backfill_curve,
    report_summary,
    write_report_csv,
    write_report_json,
)
from .core import (
    ConfigError,
    FormatError,
    SubgroupSpec,
    SyntheticWorldConfig,
    generate_world,
    write_feature_set,
)
from .losses import LOSS_KINDS, LossConfig
from .retrieval import DISTANCE_KINDS
from .tensornet import TrainingError

HEAD_SEED_OFFSET = 10_000
ALIGN_SEED_OFFSET = 20_000


@dataclass
class ExperimentConfig:
    name: str
    world: SyntheticWorldConfig  # seed is replaced per run
    head_train: TrainConfig
    align_train: TrainConfig
    policies: list[str]
    metrics: list[str]
    distance: str
    alpha_grid_points: int
    seeds: list[int]
    out_dir: str
    raw: dict

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _field(obj: dict, key: str, kind, ctx: str, default=...):
    if key not in obj:
        if default is not ...:
            return default
        raise ConfigError(f"missing field {ctx}.{key}")
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(
            f"field {ctx}.{key} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _parse_subgroup_spec(obj, ctx: str) -> SubgroupSpec | None:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise ConfigError(f"field {ctx} must be an object")
    mapping = _field(obj, "class_to_subgroup", dict, ctx)
    mults = _field(obj, "noise_multipliers", dict, ctx, default={})
    try:
        return SubgroupSpec(
            class_to_subgroup={int(k): int(v) for k, v in mapping.items()},
            noise_multipliers={int(k): float(v) for k, v in mults.items()},
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {ctx}: {exc}") from exc


def _parse_world(obj: dict, ctx: str) -> SyntheticWorldConfig:
    cfg = SyntheticWorldConfig(
        num_classes=_field(obj, "num_classes", int, ctx),
        dim=_field(obj, "dim", int, ctx),
        latent_dim=_field(obj, "latent_dim", int, ctx),
        train_per_class=_field(obj, "train_per_class", int, ctx),
        gallery_per_class=_field(obj, "gallery_per_class", int, ctx),
        query_per_class=_field(obj, "query_per_class", int, ctx),
        old_noise_sigma=_field(obj, "old_noise_sigma", float, ctx),
        new_noise_sigma=_field(obj, "new_noise_sigma", float, ctx),
        old_class_fraction=_field(obj, "old_class_fraction", float, ctx, default=1.0),
        subgroup_spec=_parse_subgroup_spec(
            obj.get("subgroup_spec"), f"{ctx}.subgroup_spec"
        ),
        seed=0,
        centroid_scale=_field(obj, "centroid_scale", float, ctx, default=3.0),
        within_sigma=_field(obj, "within_sigma", float, ctx, default=1.0),
    )
    cfg.validate()
    return cfg


def _parse_loss(obj: dict, ctx: str) -> LossConfig:
    lam = obj.get("lam")
    if lam is not None and not isinstance(lam, (int, float)):
        raise ConfigError(f"field {ctx}.lam must be a number or null")
    cfg = LossConfig(
        label_smoothing_eps=_field(obj, "label_smoothing_eps", float, ctx, default=0.1),
        lam=None if lam is None else float(lam),
        loss_kind=_field(obj, "loss_kind", str, ctx, default="l2_plus_disc"),
        uncertainty=_field(obj, "uncertainty", bool, ctx, default=True),
    )
    if cfg.loss_kind not in LOSS_KINDS:
        raise ConfigError(f"field {ctx}.loss_kind must be one of {LOSS_KINDS}")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"field {ctx}: {exc}") from exc
    return cfg


def _parse_train(obj: dict, ctx: str, with_loss: bool) -> TrainConfig:
    loss = LossConfig(label_smoothing_eps=0.0, uncertainty=False, loss_kind="disc")
    if with_loss:
        loss = _parse_loss(_field(obj, "loss", dict, ctx, default={}), f"{ctx}.loss")
    return TrainConfig(
        epochs=_field(obj, "epochs", int, ctx),
        batch_size=_field(obj, "batch_size", int, ctx),
        base_lr=_field(obj, "base_lr", float, ctx),
        warmup_epochs=_field(obj, "warmup_epochs", int, ctx, default=0),
        seed=0,
        loss=loss,
    )


def load_experiment_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path} is not valid JSON (line {exc.lineno}, "
            f"column {exc.colno}): {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    policies = _field(raw, "policies", list, "config")
    if not policies:
        raise ConfigError("config.policies must name at least one policy")
    for p in policies:
        OrderingPolicy.parse(p, default_seed=0)  # validates the name
    metrics = _field(raw, "metrics", list, "config", default=["cmc_top1", "map"])
    seeds = _field(raw, "seeds", list, "config")
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config.seeds must be a non-empty list of integers")
    distance = _field(raw, "distance", str, "config", default="l2")
    if distance not in DISTANCE_KINDS:
        raise ConfigError(f"config.distance must be one of {DISTANCE_KINDS}")
    grid_points = _field(raw, "alpha_grid_points", int, "config", default=21)
    if grid_points < 2:
        raise ConfigError("config.alpha_grid_points must be >= 2")

    return ExperimentConfig(
        name=_field(raw, "name", str, "config"),
        world=_parse_world(_field(raw, "world", dict, "config"), "config.world"),
        head_train=_parse_train(
            _field(raw, "head_train", dict, "config"), "config.head_train", False
        ),
        align_train=_parse_train(
            _field(raw, "align_train", dict, "config"), "config.align_train", True
        ),
        policies=[str(p) for p in policies],
        metrics=[str(m) for m in metrics],
        distance=distance,
        alpha_grid_points=grid_points,
        seeds=[int(s) for s in seeds],
        out_dir=_field(raw, "out_dir", str, "config", default="runs/out"),
        raw=raw,
    )


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _world_for_seed(cfg: ExperimentConfig, seed: int):
    import dataclasses

    world_cfg = dataclasses.replace(cfg.world, seed=seed)
    return generate_world(world_cfg)


def _train_cfgs(cfg: ExperimentConfig, seed: int) -> tuple[TrainConfig, TrainConfig]:
    import dataclasses

    head_cfg = dataclasses.replace(cfg.head_train, seed=seed + HEAD_SEED_OFFSET)
    align_cfg = dataclasses.replace(cfg.align_train, seed=seed + ALIGN_SEED_OFFSET)
    return head_cfg, align_cfg


def _data_dir(out: Path, seed: int) -> Path:
    return out / "data" / f"seed{seed}"


def _ckpt_dir(out: Path, seed: int) -> Path:
    return out / "ckpt" / f"seed{seed}"


def cmd_gen(cfg: ExperimentConfig, out: Path) -> int:
    """Write FFS1 feature stores for every seed plus a hashed manifest."""
    files: dict[str, str] = {}
    for seed in cfg.seeds:
        world = _world_for_seed(cfg, seed)
        ddir = _data_dir(out, seed)
        ddir.mkdir(parents=True, exist_ok=True)
        for split in ("train", "gallery", "query"):
            pair = getattr(world, split)
            for side in ("old", "new"):
                path = ddir / f"{split}_{side}.ffs"
                write_feature_set(getattr(pair, side), path)
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                files[str(path.relative_to(out))] = digest
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "seeds": cfg.seeds,
        "files": files,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(files)} feature stores under {out}")
    print(f"manifest: {out / 'manifest.json'} (config_hash={cfg.config_hash})")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    """Train head then alignment per seed; write checkpoints + loss CSV."""
    for seed in cfg.seeds:
        world = _world_for_seed(cfg, seed)
        head_cfg, align_cfg = _train_cfgs(cfg, seed)
        head = train_head(world.train.new, head_cfg)
        result = train_alignment(world.train, head, align_cfg)

        cdir = _ckpt_dir(out, seed)
        cdir.mkdir(parents=True, exist_ok=True)
        save_head(head, cdir / "head.ffn")
        save_alignnet(result.net, cdir / "align.ffa")
        lines = [f"# config_hash={cfg.config_hash} seed={seed}", "epoch,loss"]
        lines += [
            f"{i + 1},{repr(loss)}" for i, loss in enumerate(result.epoch_losses)
        ]
        _atomic_write_text(cdir / "train_losses.csv", "\n".join(lines) + "\n")
        print(
            f"seed {seed}: loss {result.epoch_losses[0]:.4f} -> "
            f"{result.epoch_losses[-1]:.4f} ({cdir})"
        )
    return 0


def _load_run(cfg: ExperimentConfig, out: Path, seed: int):
    cdir = _ckpt_dir(out, seed)
    head_path, align_path = cdir / "head.ffn", cdir / "align.ffa"
    if not head_path.exists() or not align_path.exists():
        raise FileNotFoundError(
            f"missing checkpoints under {cdir}; run `featfill train` first"
        )
    world = _world_for_seed(cfg, seed)
    return world, load_head(head_path), load_alignnet(align_path)


def cmd_backfill(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    """Run every seed x policy curve and write the cross-policy table."""
    table: dict[str, dict[str, list[float]]] = {
        p: {m: [] for m in cfg.metrics} for p in cfg.policies
    }
    grid = make_alpha_grid(cfg.alpha_grid_points)
    for seed in cfg.seeds:
        world, head, net = _load_run(cfg, out, seed)
        transformed_old = transform(net, world.gallery.old)
        bdir = out / "backfill" / f"seed{seed}"
        bdir.mkdir(parents=True, exist_ok=True)
        for policy_name in cfg.policies:
            policy = OrderingPolicy.parse(policy_name, default_seed=seed)
            ordering = make_ordering(
                policy,
                world.gallery.old,
                net=net,
                head=head,
                pairs_for_cheat=world.gallery,
                loss_cfg=cfg.align_train.loss,
            )
            plan = BackfillPlan(ordering=ordering, alpha_grid=grid)
            report = backfill_curve(
                plan,
                transformed_old,
                world.gallery.new,
                world.query.new,
                metrics=cfg.metrics,
                dist=cfg.distance,
                workers=jobs,
            )
            for m in cfg.metrics:
                table[policy_name][m].append(report.m_tilde[m])
            write_report_csv(
                report, bdir / f"{policy.name}.csv", cfg.config_hash, seed
            )
            write_report_json(
                report_summary(report, policy.name, cfg.config_hash, seed),
                bdir / f"{policy.name}.json",
            )
        print(f"seed {seed}: {len(cfg.policies)} policies -> {bdir}")

    summary = {
        "name": cfg.name,
        "config_hash": cfg.config_hash,
        "seeds": cfg.seeds,
        "metrics": cfg.metrics,
        "policies": cfg.policies,
        "table": {
            p: {
                m: {
                    "mean": float(np.mean(v)),
                    "std": float(np.std(v)),
                    "per_seed": [float(x) for x in v],
                }
                for m, v in per_metric.items()
            }
            for p, per_metric in table.items()
        },
    }
    _write_json(out / "summary.json", summary)
    print(f"summary: {out / 'summary.json'}")
    return 0


def _recheck_flip_identity(csv_path: Path, n_queries: int) -> int:
    """Re-verify hits@a - hits@0 == pos - neg on a written curve CSV."""
    rows = []
    with open(csv_path) as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in reader:
            if row["metric"] == "cmc_top1" and row["subgroup"] == "":
                rows.append(row)
    if not rows:
        raise ValueError(f"{csv_path} holds no cmc_top1 rows")
    base_hits = round(float(rows[0]["value"]) * n_queries)
    checked = 0
    for row in rows:
        hits = round(float(row["value"]) * n_queries)
        delta = int(row["pos_flips"]) - int(row["neg_flips"])
        if hits - base_hits != delta:
            raise ValueError(
                f"flip identity violated in {csv_path} at alpha={row['alpha']}"
            )
        checked += 1
    return checked


def cmd_analyze(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    """Sigma-vs-loss rank correlations, flip identity recheck, subgroup
    backfill fractions; one analysis.json plus per-seed rank-pair CSVs."""
    del jobs
    analysis: dict = {
        "name": cfg.name,
        "config_hash": cfg.config_hash,
        "per_seed": {},
    }
    for seed in cfg.seeds:
        world, head, net = _load_run(cfg, out, seed)
        gallery_old = world.gallery.old
        sigma_policy = OrderingPolicy(kind="sigma_desc")
        sigma_order = make_ordering(sigma_policy, gallery_old, net=net)

        taus = {}
        orders = {"sigma": sigma_order}
        for kind, label in (
            ("l2_plus_disc", "cheat_l2_plus_disc"),
            ("l2", "cheat_l2"),
            ("disc", "cheat_disc"),
        ):
            import dataclasses

            loss_cfg = dataclasses.replace(cfg.align_train.loss, loss_kind=kind)
            order = make_ordering(
                OrderingPolicy(kind="cheat_loss_desc"),
                gallery_old,
                net=net,
                head=head,
                pairs_for_cheat=world.gallery,
                loss_cfg=loss_cfg,
            )
            taus[label] = kendall_tau(sigma_order, order)
            orders[label] = order

        adir = out / "analysis" / f"seed{seed}"
        adir.mkdir(parents=True, exist_ok=True)
        rank_of = {
            name: {int(i): r for r, i in enumerate(order)}
            for name, order in orders.items()
        }
        lines = [f"# config_hash={cfg.config_hash} seed={seed}"]
        lines.append("id," + ",".join(f"rank_{n}" for n in orders))
        for item in np.sort(gallery_old.ids):
            ranks = ",".join(str(rank_of[n][int(item)]) for n in orders)
            lines.append(f"{int(item)},{ranks}")
        _atomic_write_text(adir / "rank_pairs.csv", "\n".join(lines) + "\n")

        seed_entry: dict = {"kendall_tau_sigma_vs": taus}

        bdir = out / "backfill" / f"seed{seed}"
        flips_checked = {}
        for policy_name in cfg.policies:
            policy = OrderingPolicy.parse(policy_name, default_seed=seed)
            csv_path = bdir / f"{policy.name}.csv"
            json_path = bdir / f"{policy.name}.json"
            if not csv_path.exists():
                continue
            summary = json.loads(json_path.read_text())
            flips_checked[policy_name] = _recheck_flip_identity(
                csv_path, summary["n_queries"]
            )
            if "backfilled_fraction" in summary:
                seed_entry.setdefault("backfilled_fraction", {})[policy_name] = (
                    summary["backfilled_fraction"]
                )
        seed_entry["flip_identity_rows_checked"] = flips_checked
        analysis["per_seed"][str(seed)] = seed_entry
        print(f"seed {seed}: tau(sigma, cheat)={taus['cheat_l2_plus_disc']:.3f}")

    _write_json(out / "analysis.json", analysis)
    print(f"analysis: {out / 'analysis.json'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featfill",
        description="Feature backfilling experiments on synthetic worlds",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("gen", "generate feature stores"),
        ("train", "train classifier head and alignment net"),
        ("backfill", "run backfill curves for every seed and policy"),
        ("analyze", "rank correlations, flip recheck, subgroup fractions"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", default=None, help="output dir (default: config out_dir)")
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)

    args = parser.parse_args(argv)
    try:
        cfg = load_experiment_config(args.config)
        if args.seed_override is not None:
            cfg.seeds = [args.seed_override]
        out = Path(args.out) if args.out else Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "backfill":
            return cmd_backfill(cfg, out, jobs=args.jobs)
        return cmd_analyze(cfg, out, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
