"""Command-line interface: train, eval, compare, ablate-prompts, replay."""

from __future__ import annotations

import dataclasses
import json
import logging
import sys

import click

from . import harness
from .agent.checkpoint import save_checkpoint
from .agent.nets import Architecture
from .agent.ppo import PpoConfig, train as ppo_train
from .env import make_env_factory
from .errors import TscBenchError
from .sim import SimConfig


def _fail(exc: Exception):
    raise click.ClickException(str(exc))


@click.group()
@click.option("--log-level", default="WARNING", show_default=True)
def main(log_level: str):
    """Traffic-signal control workbench with LLM decision refinement."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--total-slots", type=int, help="Override the training budget (slots)")
@click.option("--curve", type=click.Path(dir_okay=False), help="Write the learning curve as CSV")
def train(config_path, out, seed, total_slots, curve):
    """Train a PPO agent on undegraded observations."""
    try:
        cfg = harness.load_config(config_path)
        ppo = dict(cfg.ppo, seed=seed)
        if total_slots is not None:
            ppo["total_slots"] = total_slots
        ppo_cfg = PpoConfig.from_dict(ppo)
        sim_cfg = SimConfig.from_dict({**{"emergency_prob": 0.0}, **cfg.sim})
    except TscBenchError as exc:
        _fail(exc)

    def progress(i, stats):
        click.echo(f"rollout {i:4d}  mean reward {stats.mean_reward:8.4f}  loss {stats.loss:9.4f}", err=True)

    weights, lc = ppo_train(make_env_factory(sim_cfg), ppo_cfg, Architecture.for_sim(sim_cfg), callback=progress)
    save_checkpoint(weights, out, ppo_cfg.to_dict())
    if curve:
        with open(curve, "w", encoding="utf-8") as fh:
            fh.write("rollout,mean_reward\n")
            for i, r in enumerate(lc):
                fh.write(f"{i},{r!r}\n")
    click.echo(f"saved checkpoint to {out}")


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", required=True, type=click.Choice(["fixed", "sotl", "longest-queue", "rl", "illm"]))
@click.option("--ckpt", type=click.Path(dir_okay=False))
@click.option("--backend", type=click.Choice(["scripted", "http"]), default="scripted", show_default=True)
@click.option("--prompt-level", type=click.IntRange(1, 3), default=3, show_default=True)
@click.option("--max-attempts", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--episodes", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", type=click.Path(dir_okay=False), help="Write a JSONL per-slot trace")
@click.option("--case", type=click.Choice(sorted(harness.CASES)), help="Run a canned case scenario")
@click.option("-v", "--verbose", is_flag=True, help="Keep full prompts in the trace")
def eval_cmd(config_path, policy, ckpt, backend, prompt_level, max_attempts, episodes, seed, out, trace, case,
             verbose):
    """Evaluate one policy stack; one CSV row per seed."""
    try:
        cfg = harness.load_config(config_path)
        if case:
            scenario = harness.case_scenario(case, backend=backend, prompt_level=prompt_level)
            seeds = scenario.seed_list()
        else:
            spec = harness.PolicySpec(name=policy, backend=backend, prompt_level=prompt_level,
                                      max_attempts=max_attempts)
            scenario = dataclasses.replace(cfg.scenario, policy=spec, episodes=episodes, seeds=None)
            seeds = scenario.seed_list(seed)
        weights = None
        if scenario.policy.needs_weights:
            weights = harness.load_weights(ckpt or cfg.checkpoint)
        res = harness.run_scenario(scenario, seeds, weights, http_cfg=cfg.http, verbose=verbose)
    except TscBenchError as exc:
        _fail(exc)
    rows = [harness.metrics_row(scenario.name, scenario.policy.label, s, res.report.per_seed[s]) for s in seeds]
    harness.write_csv(rows, out)
    if trace:
        harness.write_trace([r for s in seeds for r in res.episodes[s].trace], trace)
    click.echo(f"wrote {len(rows)} rows to {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--ckpt", type=click.Path(dir_okay=False))
def compare(config_path, out, ckpt):
    """Run every (scenario x policy) cell over shared seeds; one CSV row per cell."""
    try:
        cfg = harness.load_config(config_path)
        scenarios = cfg.scenarios or [cfg.scenario]
        policies = cfg.policies or [harness.PolicySpec("fixed"), harness.PolicySpec("sotl")]
        weights = None
        if any(p.needs_weights for p in policies):
            weights = harness.load_weights(ckpt or cfg.checkpoint)
        ccfg = harness.CompareConfig(scenarios, policies, cfg.seeds)
    except TscBenchError as exc:
        _fail(exc)
    rows = harness.compare(ccfg, weights, http_cfg=cfg.http)
    harness.write_csv(rows, out, harness.CSV_COLUMNS + ["status"])
    failed = sum(r["status"] != "ok" for r in rows)
    click.echo(f"wrote {len(rows)} rows to {out} ({failed} failed)")


@main.command("ablate-prompts")
@click.option("--levels", default="1,2,3", show_default=True)
@click.option("--backend", type=click.Choice(["scripted", "http"]), default="scripted", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", type=click.Path(dir_okay=False))
def ablate_prompts(levels, backend, out, config_path, ckpt):
    """Compare prompt detail levels; waiting times are normalised by the Level-1 result."""
    try:
        lv = [int(x) for x in levels.split(",") if x.strip()]
        if not lv or any(x not in (1, 2, 3) for x in lv):
            raise click.BadParameter("levels must be a comma-separated subset of 1,2,3", param_hint="--levels")
        cfg = harness.load_config(config_path)
        weights = harness.load_weights(ckpt or cfg.checkpoint)
        rows = harness.ablate_prompts(lv, cfg.scenario, cfg.seeds, weights, backend_name=backend, http_cfg=cfg.http)
    except TscBenchError as exc:
        _fail(exc)
    harness.write_csv(rows, out, harness.ABLATION_COLUMNS)
    click.echo(f"wrote {len(rows)} rows to {out}")


@main.command()
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("-v", "--verbose", is_flag=True, help="Include prompts and raw responses")
def replay(trace, verbose):
    """Print a per-slot summary of a JSONL trace."""
    try:
        text = harness.replay(trace, verbose)
    except TscBenchError as exc:
        _fail(exc)
    sys.stdout.write(text)


@main.command("show-config")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def show_config(config_path):
    """Print the effective configuration after defaults are applied."""
    cfg = harness.load_config(config_path)
    doc = {
        "sim": cfg.scenario.sim_config().to_dict(),
        "ppo": PpoConfig.from_dict(cfg.ppo).to_dict(),
        "scenario": {"name": cfg.scenario.name, "comm": cfg.scenario.comm, "emergency": cfg.scenario.emergency,
                     "demand": cfg.scenario.demand, "channel": cfg.scenario.channel.to_dict()},
        "seeds": cfg.seeds,
    }
    click.echo(json.dumps(doc, indent=2))


if __name__ == "__main__":
    main()
