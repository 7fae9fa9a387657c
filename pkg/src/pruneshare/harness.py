"""Experiment harness: parse configs, orchestrate seeded runs, emit CSVs.

One master seed per run fans out into named substreams (init, masks, env,
exploration, replay), so swapping the sharing mode never perturbs the
environment randomness and paired cross-mode comparisons stay aligned.
Evaluation plays greedy episodes on fresh, deterministically seeded
environments at a fixed cadence.

Every output file embeds the config hash and seed; training CSVs are
byte-reproducible on rerun (wall-clock timings live in record.json and the
resources report only).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import yaml

from .envs import make_env
from .errors import ConfigError, TrainingError, UsageError
from .maa2c import A2cConfig, A2cTrainer, RolloutSegment
from .pruning import PruningSchedule
from .qmix import QmixConfig, QmixTrainer
from .seeding import substream_seed
from .sharednet import SharingMode

_ENV_NAMES = ("LBF1", "LBF2", "LBF1-desk", "LBF2-desk", "coord")
_ALGORITHMS = ("a2c", "qmix")


def parse_schedule(text: str) -> PruningSchedule:
    """Parse a dash-separated ratio string such as ``"0-0.1-0.9"``."""
    return PruningSchedule.parse(text)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _expect(mapping, key, path, required=True, default=None):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if key not in mapping:
        if required:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    return mapping[key]


def _expect_int(value, path, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return value


@dataclass
class ExperimentConfig:
    env_name: str
    algorithm: str
    mode: SharingMode
    actor_schedule: Optional[str]
    critic_schedule: Optional[str]
    seeds: tuple[int, ...]
    total_steps: int
    eval_interval: int
    eval_episodes: int
    out_dir: str
    a2c: A2cConfig
    qmix: QmixConfig
    env_overrides: dict = field(default_factory=dict)
    record_replays: bool = False
    source_text: str = ""

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r") as f:
            text = f.read()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(data, source_text=text)

    @classmethod
    def from_dict(cls, data: dict, source_text: str = "") -> "ExperimentConfig":
        env_block = _expect(data, "env", "")
        env_name = _expect(env_block, "name", "env")
        if env_name not in _ENV_NAMES:
            raise ConfigError(f"env.name: unknown environment {env_name!r}; "
                              f"expected one of {_ENV_NAMES}")
        env_overrides = _expect(env_block, "overrides", "env", required=False,
                                default={}) or {}

        algorithm = _expect(data, "algorithm", "")
        if algorithm not in _ALGORITHMS:
            raise ConfigError(f"algorithm: expected one of {_ALGORITHMS}, "
                              f"got {algorithm!r}")

        sharing = _expect(data, "sharing", "")
        mode_name = _expect(sharing, "mode", "sharing")
        clusters = _expect(sharing, "clusters", "sharing", required=False)
        try:
            mode = SharingMode.parse(
                {"mode": mode_name, "clusters": clusters})
        except ConfigError as exc:
            raise ConfigError(f"sharing.mode: {exc}") from None
        actor_schedule = _expect(sharing, "actor_schedule", "sharing",
                                 required=False)
        critic_schedule = _expect(sharing, "critic_schedule", "sharing",
                                  required=False)

        seeds = _expect(data, "seeds", "")
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds: expected a non-empty list of integers")
        seeds = tuple(_expect_int(s, f"seeds[{i}]", minimum=0)
                      for i, s in enumerate(seeds))
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds: duplicate seed values")

        total_steps = _expect_int(_expect(data, "total_steps", ""),
                                  "total_steps", minimum=1)
        eval_block = _expect(data, "eval", "", required=False, default={}) or {}
        eval_interval = _expect_int(eval_block.get("interval", 10_000),
                                    "eval.interval", minimum=1)
        eval_episodes = _expect_int(eval_block.get("episodes", 20),
                                    "eval.episodes", minimum=1)
        out_dir = _expect(data, "out_dir", "")

        a2c_cfg = _build_dataclass(A2cConfig, data.get("a2c") or {}, "a2c")
        qmix_cfg = _build_dataclass(QmixConfig, data.get("qmix") or {}, "qmix")
        record_replays = bool(data.get("record_replays", False))

        config = cls(env_name, algorithm, mode, actor_schedule,
                     critic_schedule, seeds, total_steps, eval_interval,
                     eval_episodes, str(out_dir), a2c_cfg, qmix_cfg,
                     dict(env_overrides), record_replays, source_text)
        config.validate_schedules()
        return config

    def validate_schedules(self):
        masked = (self.mode.uses_neuron_masks or self.mode.uses_weight_masks)
        if self.algorithm == "a2c":
            arity = len(self.a2c.hidden)
            wanted = {"sharing.actor_schedule": self.actor_schedule,
                      "sharing.critic_schedule": self.critic_schedule}
        else:
            # recurrent utilities: pre-GRU dense + GRU state = 2 hidden vectors
            arity = 2
            wanted = {"sharing.critic_schedule": self.critic_schedule}
        for path, text in wanted.items():
            if text is None:
                if masked:
                    raise ConfigError(f"{path}: required for mode {self.mode.kind}")
                continue
            schedule = parse_schedule(text)
            if len(schedule) != arity:
                raise ConfigError(
                    f"{path}: schedule '{text}' has {len(schedule)} entries "
                    f"but the {self.algorithm} topology has {arity} hidden "
                    f"layers")

    def canonical(self) -> dict:
        data = {
            "env": {"name": self.env_name, "overrides": self.env_overrides},
            "algorithm": self.algorithm,
            "sharing": {
                "mode": self.mode.kind,
                "clusters": list(self.mode.clusters) if self.mode.clusters else None,
                "actor_schedule": self.actor_schedule,
                "critic_schedule": self.critic_schedule,
            },
            "seeds": list(self.seeds),
            "total_steps": self.total_steps,
            "eval": {"interval": self.eval_interval,
                     "episodes": self.eval_episodes},
            "record_replays": self.record_replays,
            "a2c": asdict(self.a2c),
            "qmix": asdict(self.qmix),
        }
        return data

    def config_hash(self) -> str:
        # out_dir is provenance of where results land, not of the experiment
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def echo_dict(self) -> dict:
        data = self.canonical()
        data["out_dir"] = self.out_dir
        return data

    def replace(self, **changes) -> "ExperimentConfig":
        from dataclasses import replace as dc_replace
        return dc_replace(self, **changes)


def _build_dataclass(cls, block: dict, path: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected a mapping")
    valid = {f.name for f in cls.__dataclass_fields__.values()}
    kwargs = {}
    for key, value in block.items():
        if key not in valid:
            raise ConfigError(f"{path}.{key}: unknown option "
                              f"(valid: {sorted(valid)})")
        if key == "hidden":
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# provenance-stamped output files
# ---------------------------------------------------------------------------

def write_csv(path, provenance: dict, columns, rows):
    """All CSV output funnels through here: refuses to write without a
    config hash and seed(s) in the header comments."""
    if "config_hash" not in provenance:
        raise UsageError("output files must embed the config hash")
    if not ("seed" in provenance or "seeds" in provenance):
        raise UsageError("output files must embed the seed(s)")
    buf = io.StringIO()
    for key, value in provenance.items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_csv(path):
    """Inverse of :func:`write_csv`: returns (provenance, columns, rows)."""
    provenance = {}
    rows = []
    columns = None
    with open(path, "r") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                provenance[key] = value
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return provenance, columns, rows


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    algorithm: str
    mode: str
    env: str
    total_steps: int
    curve: list                 # [(env_step, mean_eval_return), ...]
    final_return: float
    parameter_count: int
    parameter_breakdown: dict
    wall_clock_per_1k: float
    run_dir: str

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as f:
            return cls(**json.load(f))


def _build_trainer(config: ExperimentConfig, env, master_seed: int):
    if config.algorithm == "a2c":
        return A2cTrainer.build(env, config.mode, config.actor_schedule,
                                config.critic_schedule, config.a2c,
                                master_seed)
    schedule = config.critic_schedule  # Q utilities are the critics
    return QmixTrainer.build(env, config.mode, schedule, config.qmix,
                             master_seed)


def _parameter_count(config: ExperimentConfig, trainer):
    if config.algorithm == "a2c":
        actor_total, actor_break = trainer.actor.parameter_count()
        critic_total, critic_break = trainer.critic.parameter_count()
        return actor_total + critic_total, {"actor": actor_break,
                                            "critic": critic_break}
    total, breakdown = trainer.utilities.parameter_count()
    return total, {"utilities": breakdown}


def run_single(config: ExperimentConfig, seed: int,
               run_dir: str) -> RunRecord:
    os.makedirs(run_dir, exist_ok=True)
    cfg_hash = config.config_hash()
    provenance = {"config_hash": cfg_hash, "seed": seed}

    env = make_env(config.env_name, substream_seed(seed, "env", "train"),
                   config.env_overrides)
    trainer = _build_trainer(config, env, seed)
    param_count, param_breakdown = _parameter_count(config, trainer)

    eval_index = 0
    replay_episodes = []

    def evaluate() -> float:
        nonlocal eval_index
        eval_env = make_env(config.env_name,
                            substream_seed(seed, "env", "eval", eval_index),
                            config.env_overrides,
                            record=config.record_replays)
        eval_index += 1
        result = trainer.evaluate(eval_env, config.eval_episodes)
        replay_episodes.extend(getattr(eval_env, "replay_episodes", []))
        return result

    curve = []
    log_rows = []
    next_eval = 0
    t_start = time.perf_counter()
    t_eval = 0.0
    try:
        while trainer.env_steps < config.total_steps:
            if trainer.env_steps >= next_eval:
                e0 = time.perf_counter()
                curve.append((trainer.env_steps, evaluate()))
                t_eval += time.perf_counter() - e0
                next_eval += config.eval_interval
            if config.algorithm == "a2c":
                stats = trainer.train_segment(env)
                for ep in trainer.completed_episodes:
                    log_rows.append([ep["env_step"],
                                     *[float(r) for r in ep["agent_returns"]],
                                     float(ep["team_return"]),
                                     stats.policy_loss, stats.value_loss,
                                     stats.entropy])
                trainer.completed_episodes.clear()
            else:
                stats = trainer.train_episode(env)
                mean_loss = (float(np.mean(stats.losses))
                             if stats.losses else "")
                log_rows.append([stats.env_step, stats.episode, stats.ret,
                                 mean_loss, stats.epsilon])
        e0 = time.perf_counter()
        curve.append((trainer.env_steps, evaluate()))
        t_eval += time.perf_counter() - e0
    except TrainingError:
        _flush_outputs(config, trainer, run_dir, provenance, curve, log_rows)
        raise
    train_time = time.perf_counter() - t_start - t_eval

    _flush_outputs(config, trainer, run_dir, provenance, curve, log_rows)
    if config.record_replays and replay_episodes:
        from .envs import write_replay_log
        write_replay_log(os.path.join(run_dir, "replays.jsonl"),
                         replay_episodes, provenance)
    record = RunRecord(
        config_hash=cfg_hash, seed=seed, algorithm=config.algorithm,
        mode=config.mode.kind, env=config.env_name,
        total_steps=trainer.env_steps,
        curve=[[int(s), float(r)] for s, r in curve],
        final_return=float(curve[-1][1]),
        parameter_count=param_count,
        parameter_breakdown=param_breakdown,
        wall_clock_per_1k=train_time / max(trainer.env_steps / 1000.0, 1e-9),
        run_dir=run_dir)
    record.save(os.path.join(run_dir, "record.json"))
    return record


def _flush_outputs(config, trainer, run_dir, provenance, curve, log_rows):
    write_csv(os.path.join(run_dir, "curve.csv"), provenance,
              ["env_step", "mean_return"], curve)
    if config.algorithm == "a2c":
        n = trainer.actor.n_agents
        cols = (["env_step"] + [f"return_agent{i}" for i in range(n)]
                + ["team_return", "policy_loss", "value_loss", "entropy"])
    else:
        cols = ["env_step", "episode", "return", "loss", "epsilon"]
    write_csv(os.path.join(run_dir, "train_log.csv"), provenance, cols,
              log_rows)
    meta = {"config_hash": provenance["config_hash"],
            "seed": provenance["seed"], "step": trainer.env_steps,
            "run_id": f"{provenance['config_hash']}:{provenance['seed']}"}
    trainer.save_checkpoint(os.path.join(run_dir, "checkpoint"), meta)


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """One run per seed; artifacts under ``config.out_dir``, with the config
    echoed verbatim for provenance."""
    os.makedirs(config.out_dir, exist_ok=True)
    echo = config.source_text or yaml.safe_dump(config.echo_dict(),
                                                sort_keys=True)
    with open(os.path.join(config.out_dir, "config.yaml"), "w") as f:
        f.write(echo)
    records = []
    for seed in config.seeds:
        run_dir = os.path.join(config.out_dir, f"run_s{seed}")
        records.append(run_single(config, seed, run_dir))
    return records


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------

def sweep_pruning_ratio(config: ExperimentConfig, axis: str,
                        ratios) -> list[dict]:
    """Rerun the experiment with the last hidden-layer ratio of one
    network's schedule swept over ``ratios`` (the other axis held fixed).
    Emits ``sweep_<axis>.csv`` under the base out_dir."""
    if axis not in ("actor", "critic"):
        raise ConfigError(f"sweep axis must be 'actor' or 'critic', got {axis!r}")
    base_attr = f"{axis}_schedule"
    base_text = getattr(config, base_attr)
    if base_text is None:
        raise ConfigError(f"sharing.{base_attr}: required for a {axis} sweep")
    fixed_axis = "critic" if axis == "actor" else "actor"
    fixed_text = getattr(config, f"{fixed_axis}_schedule")

    table = []
    for ratio in ratios:
        schedule = parse_schedule(base_text).with_last_ratio(float(ratio))
        sub = config.replace(
            **{base_attr: str(schedule),
               "out_dir": os.path.join(config.out_dir, f"{axis}_{ratio:g}"),
               "source_text": ""})
        records = run_experiment(sub)
        finals = np.array([r.final_return for r in records])
        std = float(finals.std(ddof=1)) if len(finals) > 1 else 0.0
        table.append({"ratio": float(ratio), "n_seeds": len(finals),
                      "mean_final_return": float(finals.mean()),
                      "std_final_return": std,
                      "stderr": std / np.sqrt(len(finals)) if len(finals) > 1 else 0.0})
    provenance = {
        "config_hash": config.config_hash(),
        "seeds": ",".join(str(s) for s in config.seeds),
        "axis": axis,
        f"fixed_{fixed_axis}_schedule": fixed_text,
        f"base_{axis}_schedule": base_text,
    }
    write_csv(os.path.join(config.out_dir, f"sweep_{axis}.csv"), provenance,
              ["ratio", "n_seeds", "mean_final_return", "std_final_return",
               "stderr"],
              [[row["ratio"], row["n_seeds"], row["mean_final_return"],
                row["std_final_return"], row["stderr"]] for row in table])
    return table


def find_records(directory) -> list[RunRecord]:
    records = []
    for root, _dirs, files in os.walk(directory):
        if "record.json" in files:
            records.append(RunRecord.load(os.path.join(root, "record.json")))
    return sorted(records, key=lambda r: (r.mode, r.seed))


def report_resources(directory, out_path=None) -> list[dict]:
    """Aggregate parameter counts and wall-clock per mode across completed
    runs; wall-clock is normalized by the slowest mode. The timing column is
    measured, so this file is not byte-reproducible."""
    records = find_records(directory)
    if not records:
        raise UsageError(f"no record.json files under {directory}")
    by_mode: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec)
    rows = []
    for mode, recs in sorted(by_mode.items()):
        counts = {r.parameter_count for r in recs}
        wall = float(np.mean([r.wall_clock_per_1k for r in recs]))
        rows.append({"mode": mode, "parameter_count": max(counts),
                     "wall_clock_per_1k": wall})
    max_wall = max(r["wall_clock_per_1k"] for r in rows)
    for r in rows:
        r["relative_wall_clock"] = r["wall_clock_per_1k"] / max_wall
    provenance = {
        "config_hash": ";".join(sorted({r.config_hash for r in records})),
        "seeds": ",".join(str(s) for s in sorted({r.seed for r in records})),
    }
    out_path = out_path or os.path.join(directory, "resources.csv")
    write_csv(out_path, provenance,
              ["mode", "parameter_count", "wall_clock_per_1k",
               "relative_wall_clock"],
              [[r["mode"], r["parameter_count"], r["wall_clock_per_1k"],
                r["relative_wall_clock"]] for r in rows])
    return rows


# ---------------------------------------------------------------------------
# mask-overhead micro-benchmark (used by the resource acceptance check)
# ---------------------------------------------------------------------------

def mask_overhead_benchmark(schedule: str = "0.5-0.5-0.5",
                            obs_width: int = 75, n_agents: int = 3,
                            n_actions: int = 6, hidden=(128, 128, 128),
                            n_steps: int = 5, repeats: int = 150,
                            seed: int = 0) -> dict:
    """Median wall-clock of one full A2C update (rollout-sized batch,
    forward + backward + optimizer) under FuPS vs the masked mode, on
    identical synthetic data. Returns the relative overhead."""
    rng = np.random.default_rng(seed)
    obs = rng.random((n_steps, n_agents, obs_width))
    actions = rng.integers(0, n_actions, size=(n_steps, n_agents))
    rewards = rng.random((n_steps, n_agents))
    terminals = np.zeros(n_steps)
    segment = RolloutSegment(obs, actions.astype(np.intp), rewards, terminals,
                             rng.random((n_agents, obs_width)))

    class _Dims:
        pass

    env = _Dims()
    env.n_agents = n_agents
    env.n_actions = n_actions
    env.obs_width = obs_width
    env.state_width = 1

    timings = {}
    cfg = A2cConfig(hidden=tuple(hidden), n_steps=n_steps)
    for label, mode, sched in (("FuPS", "FuPS", None),
                               ("masked", "SNP_PS", schedule)):
        trainer = A2cTrainer.build(env, mode, sched, sched, cfg,
                                   master_seed=seed)
        trainer.a2c_update(segment)   # warm up (JIT, allocations)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            trainer.a2c_update(segment)
            samples.append(time.perf_counter() - t0)
        timings[label] = float(np.median(samples))
    overhead = timings["masked"] / timings["FuPS"] - 1.0
    return {"fups_s": timings["FuPS"], "masked_s": timings["masked"],
            "overhead": overhead}
