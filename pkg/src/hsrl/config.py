"""Declarative run configuration (key=value sections) and run manifests.

A single INI-style document captures every tunable across the pipeline so
sweeps and ablations can snapshot the full configuration. Parsing is
strict: unknown sections or keys are rejected before any work starts, and
every value is type-checked against the schema below.
"""

from __future__ import annotations

import configparser
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .critic import CriticConfig
from .env import EnvConfig, SimFitConfig, SynthConfig
from .errors import ConfigError
from .policy import PolicyConfig
from .trainer import TRAIN_VARIANTS, TrainConfig

_BOOL_VALUES = {"true": True, "yes": True, "1": True, "on": True,
                "false": False, "no": False, "0": False, "off": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_VALUES[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {raw!r}") from None


def _parse_int_list(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "n_items": (int, 300),
        "n_clusters": (int, 8),
        "embed_dim": (int, 16),
        "n_users": (int, 120),
        "slates_per_user": (int, 16),
        "p_preferred": (float, 0.9),
        "p_other": (float, 0.02),
        "center_scale": (float, 8.0),
        "noise": (float, 0.5),
        "embeddings_path": (str, ""),
        "records_path": (str, ""),
        "ratings_path": (str, ""),
    },
    "tokenizer": {
        "levels": (int, 3),
        "vocab_size": (int, 64),
        "vocab_sizes": (_parse_int_list, ()),
    },
    "policy": {
        "d_model": (int, 32),
        "embed_dim": (int, 32),
        "profile_dim": (int, 0),
        "token_emb_from_codebook": (_parse_bool, False),
        "item_emb_from_features": (_parse_bool, True),
    },
    "critic": {
        "hidden": (int, 64),
        "per_level_heads": (_parse_bool, False),
    },
    "simulator": {
        "embed_dim": (int, 32),
        "epochs": (int, 6),
        "batch_size": (int, 32),
        "learning_rate": (float, 0.01),
        "freeze_item_emb": (_parse_bool, True),
    },
    "env": {
        "slate_size": (int, 5),
        "patience": (int, 3),
        "horizon": (int, 20),
        "history_window": (int, 10),
    },
    "training": {
        "gamma": (float, 0.9),
        "lambda_entropy": (float, 0.1),
        "lambda_bc": (float, 0.5),
        "advantage_clip": (float, 1.0),
        "iterations": (int, 20000),
        "batch_episodes": (int, 1),
        "learning_rate": (float, 1e-3),
        "target_mode": (str, "soft"),
        "target_tau": (float, 0.005),
        "target_period": (int, 100),
        "eval_every": (int, 2000),
        "eval_episodes": (int, 20),
        "variant": (str, "full"),
        "detach_critic_encoder": (_parse_bool, False),
        "num_seeds": (int, 1),
    },
    "seeds": {
        "tokenizer": (int, 7),
        "simulator": (int, 11),
        "agent": (int, 13),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def flat(self) -> dict[str, object]:
        return {f"{s}.{k}": v for s, sec in self.values.items()
                for k, v in sec.items()}

    # -- derived module configs ------------------------------------------

    def vocab_sizes(self) -> tuple[int, ...]:
        tok = self.values["tokenizer"]
        explicit = tok["vocab_sizes"]
        if explicit:
            if tok["levels"] != len(explicit):
                raise ConfigError("tokenizer.levels disagrees with vocab_sizes list")
            return tuple(explicit)
        return (tok["vocab_size"],) * tok["levels"]

    def synth_config(self) -> SynthConfig:
        d = self.values["data"]
        return SynthConfig(
            n_items=d["n_items"], n_clusters=d["n_clusters"], dim=d["embed_dim"],
            n_users=d["n_users"], slates_per_user=d["slates_per_user"],
            slate_size=self.values["env"]["slate_size"],
            p_preferred=d["p_preferred"], p_other=d["p_other"],
            center_scale=d["center_scale"], noise=d["noise"])

    def policy_config(self, n_items: int) -> PolicyConfig:
        p = self.values["policy"]
        return PolicyConfig(
            n_items=n_items, vocab_sizes=self.vocab_sizes(),
            d_model=p["d_model"], embed_dim=p["embed_dim"],
            history_window=self.values["env"]["history_window"],
            profile_dim=p["profile_dim"],
            token_emb_from_codebook=p["token_emb_from_codebook"],
            item_emb_from_features=p["item_emb_from_features"])

    def critic_config(self) -> CriticConfig:
        c = self.values["critic"]
        return CriticConfig(d_model=self.values["policy"]["d_model"],
                            levels=len(self.vocab_sizes()),
                            hidden=c["hidden"],
                            per_level_heads=c["per_level_heads"])

    def env_config(self) -> EnvConfig:
        e = self.values["env"]
        return EnvConfig(slate_size=e["slate_size"], patience=e["patience"],
                         horizon=e["horizon"],
                         history_window=e["history_window"])

    def sim_config(self) -> SimFitConfig:
        s = self.values["simulator"]
        return SimFitConfig(embed_dim=s["embed_dim"],
                            history_window=self.values["env"]["history_window"],
                            epochs=s["epochs"], batch_size=s["batch_size"],
                            learning_rate=s["learning_rate"],
                            freeze_item_emb=s["freeze_item_emb"])

    def train_config(self) -> TrainConfig:
        t = self.values["training"]
        return TrainConfig(
            gamma=t["gamma"], lambda_entropy=t["lambda_entropy"],
            lambda_bc=t["lambda_bc"], advantage_clip=t["advantage_clip"],
            iterations=t["iterations"], batch_episodes=t["batch_episodes"],
            learning_rate=t["learning_rate"], target_mode=t["target_mode"],
            target_tau=t["target_tau"], target_period=t["target_period"],
            eval_every=t["eval_every"], eval_episodes=t["eval_episodes"],
            variant=t["variant"],
            detach_critic_encoder=t["detach_critic_encoder"])

    def seeds(self) -> dict[str, int]:
        return dict(self.values["seeds"])

    def agent_seeds(self) -> list[int]:
        base = self.values["seeds"]["agent"]
        return [base + i for i in range(self.values["training"]["num_seeds"])]


def default_config() -> RunConfig:
    return RunConfig({s: {k: default for k, (_, default) in sec.items()}
                      for s, sec in SCHEMA.items()})


def _validate(cfg: RunConfig) -> RunConfig:
    d = cfg.values["data"]
    if d["source"] not in ("synthetic", "files"):
        raise ConfigError(f"data.source must be synthetic or files, got {d['source']!r}")
    t = cfg.values["training"]
    if t["variant"] not in TRAIN_VARIANTS:
        raise ConfigError(f"training.variant must be one of {TRAIN_VARIANTS}")
    if t["num_seeds"] < 1:
        raise ConfigError("training.num_seeds must be >= 1")
    if t["iterations"] < 0:
        raise ConfigError("training.iterations must be >= 0")
    if t["eval_episodes"] < 1:
        raise ConfigError("training.eval_episodes must be >= 1")
    for name, value in cfg.values["seeds"].items():
        if value < 0:
            raise ConfigError(f"seeds.{name} must be non-negative")
    if cfg.values["env"]["patience"] < 1:
        raise ConfigError("env.patience must be >= 1")
    if cfg.values["env"]["horizon"] < 1:
        raise ConfigError("env.horizon must be >= 1")
    cfg.vocab_sizes()
    cfg.train_config()  # reuses TrainConfig's own validation
    return cfg


def load_config(path) -> RunConfig:
    """Parse and validate a config document; unknown keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kind, _ = SCHEMA[section][key]
            try:
                cfg.values[section][key] = kind(raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r}") from None
    return _validate(cfg)


def apply_seed_overrides(cfg: RunConfig, tokenizer=None, simulator=None,
                         agent=None) -> RunConfig:
    for name, value in (("tokenizer", tokenizer), ("simulator", simulator),
                        ("agent", agent)):
        if value is not None:
            if value < 0:
                raise ConfigError(f"--seed-{name} must be non-negative")
            cfg.values["seeds"][name] = value
    return cfg


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def _git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


class Manifest:
    """Written with status=running before any work; finalized afterwards,
    so a crash leaves a manifest that marks the run incomplete."""

    def __init__(self, out_dir: Path, command: str, cfg: RunConfig,
                 outputs: list[str]):
        from . import __version__

        self.path = Path(out_dir) / "manifest.json"
        self._t0 = time.time()
        self.payload = {
            "command": command,
            "version": __version__,
            "git": _git_stamp(),
            "config": cfg.flat(),
            "seeds": cfg.seeds(),
            "outputs": outputs,
            "status": "running",
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self._t0)),
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.payload, indent=2, sort_keys=True) + "\n")

    def finalize(self, status: str = "complete", error: str | None = None) -> None:
        self.payload["status"] = status
        self.payload["wall_clock_s"] = round(time.time() - self._t0, 3)
        if error is not None:
            self.payload["error"] = error
        self._write()
