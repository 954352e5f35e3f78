"""Command-line harness tying the pipeline together.

Commands: tokenize, fit-sim, train, eval, sweep, ablate, gen-data. Every
run resolves its configuration document, writes a manifest before doing
any work, and emits CSV outputs that are bitwise-reproducible for a fixed
(config, seeds) pair. Exit codes: 0 success, 2 config error, 3 data or
format error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from statistics import median

import numpy as np

from . import env as env_mod
from . import tokenizer as tok_mod
from . import trainer as tr_mod
from .checkpoint import load_tensors, save_tensors
from .config import (Manifest, RunConfig, apply_seed_overrides, default_config,
                     load_config)
from .errors import ConfigError, DataError, FormatError, NumericsError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SWEEP_GRIDS = {
    "entropy": [0.0, 0.1, 0.2, 0.3],
    "vocab": [16, 32, 64, 80, 128],
    "levels": [2, 3, 4, 5],
}

_DATA_SEED_TAG = 100


# ---------------------------------------------------------------------------
# Pipeline builders
# ---------------------------------------------------------------------------


def _load_dataset(cfg: RunConfig, out: Path):
    """Resolve (items, records) from the synthetic generator or user files."""
    data = cfg["data"]
    if data["source"] == "synthetic":
        synth = env_mod.generate_synthetic(
            cfg.synth_config(), [cfg["seeds"]["simulator"], _DATA_SEED_TAG])
        tok_mod.save_embeddings(out / "embeddings.tsv", synth.items)
        env_mod.save_records(out / "records.tsv", synth.records)
        return synth.items, synth.records

    if not data["embeddings_path"]:
        raise DataError("data.source=files needs data.embeddings_path")
    items = tok_mod.load_embeddings(data["embeddings_path"])
    if data["records_path"]:
        records = env_mod.load_records(data["records_path"])
    elif data["ratings_path"]:
        records, _ = env_mod.ingest_ml1m_style(data["ratings_path"])
    else:
        raise DataError("data.source=files needs records_path or ratings_path")
    return items, records


def _build_codebook(cfg: RunConfig, items, out: Path):
    book, index = tok_mod.fit_codebook(items, cfg.vocab_sizes(),
                                       cfg["seeds"]["tokenizer"])
    tok_mod.save_codebook(out / "codebook.bin", book, index)
    return book, index


def _build_simulators(cfg: RunConfig, items, records, out: Path):
    n_items = int(items.ids.max()) + 1
    train_sim, eval_sim = env_mod.fit_simulators(
        records, n_items, cfg.sim_config(), cfg["seeds"]["simulator"],
        item_features=items.vectors)
    env_mod.save_response_model(out / "sim_train.ckpt", train_sim)
    env_mod.save_response_model(out / "sim_eval.ckpt", eval_sim)
    return train_sim, eval_sim


def _build_context(cfg: RunConfig, out: Path) -> tr_mod.ExperimentContext:
    items, records = _load_dataset(cfg, out)
    book, index = _build_codebook(cfg, items, out)
    train_sim, eval_sim = _build_simulators(cfg, items, records, out)
    pool = env_mod.make_user_pool(records)
    env_cfg = cfg.env_config()
    n_items = int(items.ids.max()) + 1
    return tr_mod.ExperimentContext(
        policy_cfg=cfg.policy_config(n_items),
        critic_cfg=cfg.critic_config(),
        env_cfg=env_cfg,
        codebook=book,
        index=index,
        catalog=[int(i) for i in items.ids],
        train_env=env_mod.Environment(train_sim, pool, env_cfg),
        eval_env=env_mod.Environment(eval_sim, pool, env_cfg),
        item_features=items.vectors,
    )


def _save_agent(path, agent: tr_mod.Agent) -> None:
    save_tensors(path, agent.tensors())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    synth = env_mod.generate_synthetic(
        cfg.synth_config(), [cfg["seeds"]["simulator"], _DATA_SEED_TAG])
    tok_mod.save_embeddings(out / "embeddings.tsv", synth.items)
    env_mod.save_records(out / "records.tsv", synth.records)
    with open(out / "clusters.tsv", "w") as fh:
        for i, c in enumerate(synth.item_clusters):
            fh.write(f"item\t{i}\t{c}\n")
        for u, p in enumerate(synth.user_prefs):
            fh.write(f"user\t{u}\t{p}\n")
    print(f"wrote {len(synth.items)} items and {len(synth.records)} records to {out}")
    return 0


def cmd_tokenize(cfg: RunConfig, out: Path, args) -> int:
    items, _ = _load_dataset(cfg, out)
    book, index = _build_codebook(cfg, items, out)
    report = tok_mod.collision_report(index, book.vocab_sizes)
    print(f"codebook: L={book.levels} d={book.dim} vocab={book.vocab_sizes}")
    print(f"items={report.n_items} sids={report.n_sids} "
          f"collided={report.n_collided_sids} max_bucket={report.max_bucket}")
    for lvl, h in enumerate(report.level_entropy):
        cap = float(np.log(book.vocab_sizes[lvl]))
        print(f"level {lvl + 1}: token entropy {h:.4f} (max {cap:.4f})")
    return 0


def cmd_fit_sim(cfg: RunConfig, out: Path, args) -> int:
    items, records = _load_dataset(cfg, out)
    _build_simulators(cfg, items, records, out)
    print(f"fitted train/eval simulators on {len(records)} records -> {out}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    ctx = _build_context(cfg, out)
    train_cfg = cfg.train_config()
    seed = cfg["seeds"]["agent"]
    agent = tr_mod.Agent(ctx.policy_cfg, ctx.critic_cfg, train_cfg, ctx.index,
                         ctx.catalog, seed, ctx.codebook, ctx.item_features)
    metrics = tr_mod.MetricsWriter(
        out / "metrics.csv", tr_mod.metrics_columns(len(cfg.vocab_sizes())))
    evals = tr_mod.MetricsWriter(out / "eval_metrics.csv", tr_mod.EVAL_COLUMNS)
    try:
        tr_mod.run_training(agent, ctx, seed, metrics, evals)
    except NumericsError as exc:
        # Parameters are still last-good: the optimizer aborts before applying.
        _save_agent(out / "agent.ckpt", agent)
        (out / "abort.json").write_text(json.dumps(
            {"error": str(exc), "updates": agent.updates}, indent=2) + "\n")
        raise
    finally:
        metrics.close()
        evals.close()
    _save_agent(out / "agent.ckpt", agent)
    final = tr_mod.evaluate(agent, ctx.eval_env, train_cfg.eval_episodes,
                            seed, tr_mod._FINAL_EVAL_TAG)
    rewards = [m.total_reward for m in final]
    depths = [m.depth for m in final]
    print(f"trained {agent.updates} updates over {train_cfg.iterations} "
          f"interaction steps (variant={train_cfg.variant})")
    if final:
        print(f"eval: mean total reward {np.mean(rewards):.4f}, "
              f"mean depth {np.mean(depths):.2f} over {len(final)} episodes")
    return 0


def _check_checkpoint_compat(named: dict, book) -> None:
    for lvl, t_l in enumerate(book.vocab_sizes):
        key = f"hpn/level{lvl}/head_w"
        if key not in named:
            raise DataError(f"checkpoint misses level {lvl + 1}; codebook has "
                            f"L={book.levels}")
        if named[key].shape[0] != t_l:
            raise DataError(
                f"checkpoint/codebook mismatch at level {lvl + 1}: "
                f"head rows {named[key].shape[0]} vs vocab {t_l}")
    if f"hpn/level{book.levels}/head_w" in named:
        raise DataError(f"checkpoint has more levels than codebook L={book.levels}")


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ctx = _build_context(cfg, out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "agent.ckpt"
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    named = load_tensors(ckpt)
    _check_checkpoint_compat(named, ctx.codebook)
    train_cfg = cfg.train_config()
    seed = cfg["seeds"]["agent"]
    agent = tr_mod.Agent(ctx.policy_cfg, ctx.critic_cfg, train_cfg, ctx.index,
                         ctx.catalog, seed, ctx.codebook, ctx.item_features)
    try:
        agent.load_arrays(named)
    except Exception as exc:
        raise DataError(f"checkpoint does not fit this config: {exc}") from exc
    episodes = tr_mod.evaluate(agent, ctx.eval_env, train_cfg.eval_episodes,
                               seed, tr_mod._FINAL_EVAL_TAG)
    writer = tr_mod.MetricsWriter(out / "eval_summary.csv", tr_mod.EVAL_COLUMNS)
    try:
        writer.write(tr_mod._summary_row(0, episodes, seed))
    finally:
        writer.close()
    rewards = [m.total_reward for m in episodes]
    depths = [float(m.depth) for m in episodes]
    print(f"episodes={len(episodes)}")
    print(f"total_reward mean={np.mean(rewards):.4f} median={median(rewards):.4f} "
          f"std={np.std(rewards):.4f}")
    print(f"depth mean={np.mean(depths):.2f} median={median(depths):.2f} "
          f"std={np.std(depths):.2f}")
    return 0


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    ctx = _build_context(cfg, out)
    base_cfg = cfg.train_config()
    seeds = cfg.agent_seeds()
    results = {v: tr_mod.run_ablation(v, ctx, base_cfg, seeds)
               for v in tr_mod.ABLATION_VARIANTS}
    full = results["full"]
    writer = tr_mod.MetricsWriter(out / "ablation.csv", [
        "variant", "median_total_reward", "median_depth",
        "delta_total_reward_pct", "delta_depth_pct", "n_seeds"])
    try:
        for variant in tr_mod.ABLATION_VARIANTS:
            res = results[variant]
            d_r = _pct_delta(res["median_total_reward"], full["median_total_reward"])
            d_d = _pct_delta(res["median_depth"], full["median_depth"])
            writer.write([variant, res["median_total_reward"],
                          res["median_depth"], d_r, d_d, len(seeds)])
            print(f"{variant}: median reward {res['median_total_reward']:.4f} "
                  f"({d_r:+.1f}%), median depth {res['median_depth']:.2f}")
    finally:
        writer.close()
    return 0


def _pct_delta(value: float, reference: float) -> float:
    if reference == 0.0:
        return 0.0
    return 100.0 * (value - reference) / abs(reference)


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    axis = args.axis
    grid = SWEEP_GRIDS[axis]
    seeds = cfg.agent_seeds()
    items, records = _load_dataset(cfg, out)
    train_sim, eval_sim = _build_simulators(cfg, items, records, out)
    pool = env_mod.make_user_pool(records)
    env_cfg = cfg.env_config()
    n_items = int(items.ids.max()) + 1

    writer = tr_mod.MetricsWriter(out / "sweep.csv", [
        "axis", "value", "median_total_reward", "mean_total_reward",
        "median_depth", "mean_depth", "n_seeds"])
    try:
        for value in grid:
            point = RunConfig({s: dict(sec) for s, sec in cfg.values.items()})
            if axis == "entropy":
                point.values["training"]["lambda_entropy"] = value
            elif axis == "vocab":
                point.values["tokenizer"]["vocab_size"] = value
                point.values["tokenizer"]["vocab_sizes"] = ()
            else:
                point.values["tokenizer"]["levels"] = value
                point.values["tokenizer"]["vocab_sizes"] = ()
            book, index = tok_mod.fit_codebook(items, point.vocab_sizes(),
                                               point["seeds"]["tokenizer"])
            ctx = tr_mod.ExperimentContext(
                policy_cfg=point.policy_config(n_items),
                critic_cfg=point.critic_config(),
                env_cfg=env_cfg, codebook=book, index=index,
                catalog=[int(i) for i in items.ids],
                train_env=env_mod.Environment(train_sim, pool, env_cfg),
                eval_env=env_mod.Environment(eval_sim, pool, env_cfg),
                item_features=items.vectors,
            )
            base = point.train_config()
            rewards, depths = [], []
            for seed in seeds:
                _, metrics = tr_mod.run_experiment(ctx, base, seed)
                rewards.append(float(np.mean([m.total_reward for m in metrics])))
                depths.append(float(np.mean([m.depth for m in metrics])))
            writer.write([axis, value, float(median(rewards)),
                          float(np.mean(rewards)), float(median(depths)),
                          float(np.mean(depths)), len(seeds)])
            print(f"{axis}={value}: median reward {median(rewards):.4f}")
    finally:
        writer.close()
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


_COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic catalog and logs"),
    "tokenize": (cmd_tokenize, "fit the semantic-ID codebook"),
    "fit-sim": (cmd_fit_sim, "fit the train/eval user simulators"),
    "train": (cmd_train, "train the agent and write metrics"),
    "eval": (cmd_eval, "evaluate a checkpoint on the eval simulator"),
    "sweep": (cmd_sweep, "sensitivity sweep over one axis"),
    "ablate": (cmd_ablate, "run the ablation variants"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsrl")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to the run configuration document")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed-tok", type=int, dest="seed_tok")
        p.add_argument("--seed-sim", type=int, dest="seed_sim")
        p.add_argument("--seed-agent", type=int, dest="seed_agent")
        if name == "eval":
            p.add_argument("--checkpoint", help="agent checkpoint to evaluate")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=sorted(SWEEP_GRIDS))
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        apply_seed_overrides(cfg, tokenizer=args.seed_tok,
                             simulator=args.seed_sim, agent=args.seed_agent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, args.command, cfg, outputs=[str(out)])
    try:
        code = _COMMANDS[args.command][0](cfg, out, args)
    except ConfigError as exc:
        manifest.finalize("failed", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        manifest.finalize("failed", str(exc))
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        manifest.finalize("failed", str(exc))
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.finalize("complete")
    return code


if __name__ == "__main__":
    sys.exit(main())
