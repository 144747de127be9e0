"""Command-line front door: world generation, the two training phases,
evaluation, and the diagnostic reports.

Every command takes an explicit --seed (no wall-clock seeding) and writes
outputs atomically, so rerunning with identical flags produces byte-identical
files. Existing outputs are refused unless --overwrite is given. Exit codes:
0 success, 1 runtime error (single-line ``error: ...`` on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import completion as cp
from . import episodes as ep
from . import fusion, nn
from .datagen import World, WorldSpec, generate_world, load_world, save_world
from .fileio import atomic_write_json, atomic_write_text
from .knowledge import compute_attribute_stats, compute_base_prototypes, \
    cluster_variance_report, inject_knowledge_noise


def _require_new(path: str, overwrite: bool) -> None:
    if os.path.exists(path) and not overwrite:
        raise FileExistsError(f"{path} exists; pass --overwrite to replace it")


def _load_world_and_stats(world_dir: str):
    world = load_world(world_dir)
    prototypes = compute_base_prototypes(world.base.embeddings, world.base.labels)
    stats = compute_attribute_stats(world.base.embeddings, world.base.labels, world.knowledge)
    return world, prototypes, stats


def _print_report(report: ep.EvalReport) -> None:
    print(f"{'mode':<16}{'n-way':>6}{'k-shot':>8}{'episodes':>10}{'accuracy':>12}{'95% CI':>10}")
    print(f"{report.mode:<16}{report.n_way:>6}{report.k_shot:>8}{report.episodes:>10}"
          f"{report.mean_acc * 100:>11.2f}%{report.ci95 * 100:>9.2f}%")


def _cmd_gen(args) -> int:
    spec = WorldSpec(
        dim=args.dim, semantic_dim=args.semantic_dim,
        num_base_classes=args.base_classes, num_novel_classes=args.novel_classes,
        num_attributes=args.attributes,
        attributes_per_class=(args.attrs_per_class[0], args.attrs_per_class[1]),
        samples_per_class=args.samples_per_class,
        noise_std=args.noise_std, dropout_rate=args.dropout,
        seed=args.seed, offset_std=args.offset_std,
        novel_noise_std=args.novel_noise_std,
    )
    _require_new(os.path.join(args.out, "base.manifest.json"), args.overwrite)
    world = generate_world(spec)
    save_world(world, args.out)
    print(f"world written to {args.out}: {world.base.n} base / {world.novel.n} novel samples, "
          f"{world.knowledge.num_attributes} attributes")
    return 0


def _cmd_train_completion(args) -> int:
    _require_new(args.out, args.overwrite)
    world, prototypes, stats = _load_world_and_stats(args.world)
    episodes_per_epoch = args.episodes_per_epoch or 4 * len(world.knowledge.base_class_ids)
    params = cp.CompletionNetParams.initialize(
        world.base.dim, world.knowledge.semantic_dim, seed=args.seed)
    tasks = cp.sample_completion_tasks(
        world.base.embeddings, world.base.labels, prototypes,
        k_shot=args.k_shot, count=args.epochs * episodes_per_epoch,
        rng=np.random.default_rng([args.seed, 1]))
    config = nn.SgdConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                          weight_decay=args.weight_decay, epochs=args.epochs)
    losses = cp.train_completion(params, world.knowledge, stats, tasks, config,
                                 rng=np.random.default_rng([args.seed, 2]))
    cp.save_model(params, args.out, metadata={
        "phase": "completion",
        "seed": args.seed,
        "epochs": args.epochs,
        "episodes_per_epoch": episodes_per_epoch,
        "k_shot": args.k_shot,
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "losses": losses,
    })
    print(f"completion training: {args.epochs} epochs, "
          f"loss {losses[0]:.6f} -> {losses[-1]:.6f}; checkpoint at {args.out}")
    return 0


def _cmd_meta_train(args) -> int:
    _require_new(args.out, args.overwrite)
    world, _, stats = _load_world_and_stats(args.world)
    params, meta = cp.load_model(args.checkpoint)
    episodes_per_epoch = args.episodes_per_epoch or 4 * len(world.knowledge.base_class_ids)
    config = ep.MetaTrainConfig(
        optimizer=nn.SgdConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                               weight_decay=args.weight_decay, epochs=args.epochs),
        n_way=args.n_way, k_shot=args.k_shot, m_query=args.m_query,
        episodes_per_epoch=episodes_per_epoch,
        lam=args.lam, variance_floor=args.variance_floor, seed=args.seed)
    _, losses = ep.meta_train(params, world.base, world.knowledge, stats, config)
    cp.save_model(params, args.out, metadata={
        "phase": "meta",
        "initialized_from": meta,
        "seed": args.seed,
        "epochs": args.epochs,
        "episodes_per_epoch": episodes_per_epoch,
        "n_way": args.n_way,
        "k_shot": args.k_shot,
        "m_query": args.m_query,
        "learning_rate": args.learning_rate,
        "losses": losses,
    })
    print(f"episodic fine-tuning: {args.epochs} epochs, "
          f"loss {losses[0]:.6f} -> {losses[-1]:.6f}; checkpoint at {args.out}")
    return 0


def _split_dataset(world: World, split: str):
    return world.base if split == "base" else world.novel


def _cmd_eval(args) -> int:
    _require_new(args.out, args.overwrite)
    if args.dump_fusion:
        _require_new(args.dump_fusion, args.overwrite)
    world, _, stats = _load_world_and_stats(args.world)
    params, _ = cp.load_model(args.checkpoint)
    dump = [] if args.dump_fusion else None
    report = ep.evaluate(params, _split_dataset(world, args.split), world.knowledge, stats,
                         mode=args.mode, n_way=args.n_way, k_shot=args.k_shot,
                         m_query=args.m_query, num_episodes=args.episodes,
                         seed=args.seed, lam=args.lam, floor=args.variance_floor,
                         fusion_dump=dump)
    atomic_write_json(args.out, report.to_json_dict())
    if args.dump_fusion:
        import json
        atomic_write_text(args.dump_fusion,
                          "\n".join(json.dumps(e, sort_keys=True) for e in dump) + "\n")
    _print_report(report)
    return 0


ABLATION_ROWS = (
    ("i", ep.MODE_MEAN_ONLY),
    ("ii", ep.MODE_COMPLETED_ONLY),
    ("iii", ep.MODE_MEAN_FUSION),
    ("iv", ep.MODE_GAUSS_FUSION),
)


def _cmd_ablate(args) -> int:
    _require_new(args.out, args.overwrite)
    world, _, stats = _load_world_and_stats(args.world)
    params, _ = cp.load_model(args.checkpoint)
    reports = {}
    print(f"{'row':<6}{'mode':<18}{'accuracy':>12}{'95% CI':>10}")
    for row, mode in ABLATION_ROWS:
        report = ep.evaluate(params, _split_dataset(world, args.split), world.knowledge,
                             stats, mode=mode, n_way=args.n_way, k_shot=args.k_shot,
                             m_query=args.m_query, num_episodes=args.episodes,
                             seed=args.seed, lam=args.lam, floor=args.variance_floor)
        reports[mode] = report.to_json_dict()
        print(f"({row})".ljust(6) + f"{mode:<18}{report.mean_acc * 100:>11.2f}%"
              f"{report.ci95 * 100:>9.2f}%")
    atomic_write_json(args.out, reports)
    return 0


def _cmd_noise_sweep(args) -> int:
    _require_new(args.out, args.overwrite)
    world, _, stats = _load_world_and_stats(args.world)
    params, _ = cp.load_model(args.checkpoint)
    sweep_modes = (ep.MODE_COMPLETED_ONLY, ep.MODE_GAUSS_FUSION)
    results = {mode: {} for mode in sweep_modes}
    for i, gamma in enumerate(args.gamma_noise):
        # Noise corrupts the association matrix consumed at evaluation time;
        # attribute statistics stay those of the clean base knowledge.
        noisy = inject_knowledge_noise(world.knowledge, gamma, seed=(args.seed, i))
        for mode in sweep_modes:
            report = ep.evaluate(params, _split_dataset(world, args.split), noisy, stats,
                                 mode=mode, n_way=args.n_way, k_shot=args.k_shot,
                                 m_query=args.m_query, num_episodes=args.episodes,
                                 seed=args.seed, lam=args.lam, floor=args.variance_floor)
            results[mode][f"{gamma}"] = report.to_json_dict()
    print(f"{'mode':<18}" + "".join(f"{'noise=' + str(g):>14}" for g in args.gamma_noise))
    for mode in sweep_modes:
        cells = "".join(f"{results[mode][str(g)]['mean_acc'] * 100:>13.2f}%"
                        for g in args.gamma_noise)
        print(f"{mode:<18}{cells}")
    atomic_write_json(args.out, results)
    return 0


def _cmd_report(args) -> int:
    similarity_path = args.out_prefix + "-similarity.json"
    curve_path = args.out_prefix + "-rank-curve.csv"
    _require_new(similarity_path, args.overwrite)
    _require_new(curve_path, args.overwrite)
    world, _, stats = _load_world_and_stats(args.world)
    params, _ = cp.load_model(args.checkpoint)
    dataset = _split_dataset(world, args.split)

    similarity = ep.prototype_similarity_report(
        params, dataset, world.centers, world.knowledge, stats,
        num_episodes=args.episodes, n_way=args.n_way, k_shot=args.k_shot,
        m_query=args.m_query, seed=args.seed, lam=args.lam, floor=args.variance_floor)
    atomic_write_json(similarity_path, similarity.to_json_dict())

    curve = ep.rank_curve_report(params, dataset, world.centers, world.knowledge,
                                 stats, window=args.window)
    lines = ["rank,mean_based,completed"]
    for r in curve.ranks:
        lines.append(f"{r},{curve.raw[r]!r},{curve.completed[r]!r}")
    atomic_write_text(curve_path, "\n".join(lines) + "\n")

    base_var = cluster_variance_report(world.base.embeddings, world.base.labels)
    novel_var = cluster_variance_report(world.novel.embeddings, world.novel.labels)
    print(f"{'estimate':<14}{'cos(proto, center)':>20}")
    print(f"{'mean-based':<14}{similarity.mean_based:>20.4f}")
    print(f"{'completed':<14}{similarity.completed:>20.4f}")
    print(f"{'fused':<14}{similarity.fused:>20.4f}")
    print(f"averaged variance: base {base_var.average:.4f} / novel {novel_var.average:.4f}")
    print(f"rank curve written to {curve_path} (window {curve.window})")
    return 0


def _add_eval_shape(p: argparse.ArgumentParser, episodes_default: int) -> None:
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--m-query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=episodes_default)
    p.add_argument("--lambda", dest="lam", type=float, default=fusion.DEFAULT_LAMBDA,
                   help="softmax sharpness for soft assignment")
    p.add_argument("--variance-floor", type=float, default=fusion.EPSILON_VARIANCE)
    p.add_argument("--split", choices=("base", "novel"), default="novel")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofuse",
        description="Prototype completion with Bayesian Gaussian fusion for "
                    "few-shot classification over fixed embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic embedding world")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--semantic-dim", type=int, default=32)
    p.add_argument("--base-classes", type=int, default=32)
    p.add_argument("--novel-classes", type=int, default=8)
    p.add_argument("--attributes", type=int, default=20)
    p.add_argument("--attrs-per-class", type=int, nargs=2, default=(6, 10),
                   metavar=("LO", "HI"))
    p.add_argument("--samples-per-class", type=int, default=60)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--novel-noise-std", type=float, default=None)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--offset-std", type=float, default=0.3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train-completion", help="train the prototype completion network")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--episodes-per-epoch", type=int, default=None,
                   help="default: 4x the number of base classes")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_train_completion)

    p = sub.add_parser("meta-train", help="episodically fine-tune through the fused pipeline")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--episodes-per-epoch", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    _add_eval_shape(p, episodes_default=600)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_meta_train)

    p = sub.add_parser("eval", help="evaluate one prototype mode over sampled episodes")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ep.MODES, required=True)
    _add_eval_shape(p, episodes_default=600)
    p.add_argument("--dump-fusion", default=None,
                   help="optional JSONL path for per-episode fusion diagnostics")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run all four prototype modes on the same episodes")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_eval_shape(p, episodes_default=600)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("noise-sweep",
                       help="evaluate under knowledge noise, with and without fusion")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma-noise", type=float, nargs="+", required=True,
                   help="flip probabilities for association entries")
    _add_eval_shape(p, episodes_default=600)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_noise_sweep)

    p = sub.add_parser("report",
                       help="prototype-similarity table and rank-curve CSV")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-prefix", required=True)
    _add_eval_shape(p, episodes_default=1000)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
