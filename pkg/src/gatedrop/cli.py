"""Command-line entry point: ``simulate``, ``train`` and ``sweep``, all writing CSV.

Config files are flat ``key=value`` lines with ``#`` comments; flags of the
same names override file values. Exit codes: 0 success, 1 runtime error,
2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cluster import ClusterSimulator, Mode, gaussian_tokens, place_experts, random_layer, split_batch
from .costmodel import (
    CostParams,
    expected_step_comm_bytes,
    no_alltoall_throughput,
    throughput_estimate,
)
from .errors import GateDropError
from .trainer import HyperParams, TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

P_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
M_GRID = (8, 16, 32, 64, 128)

SIMULATE_COLUMNS = ("M", "p", "mode", "predicted_tokens_per_sec", "measured_ledger_bytes", "predicted_bytes")
TRAIN_COLUMNS = ("step", "loss", "balance_loss", "drop_on", "comm_bytes", "lr", "expert_entropy")
SWEEP_P_COLUMNS = ("p", "mode", "predicted_tokens_per_sec", "measured_ledger_bytes", "predicted_bytes",
                   "final_eval_loss", "finite")
SWEEP_M_COLUMNS = ("M", "N", "baseline_tokens_per_sec", "no_alltoall_tokens_per_sec", "improvement",
                   "predicted_tokens_per_sec")


class ConfigError(GateDropError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    d: int = 16
    d_ff: int | None = None  # defaults to 4 * d
    N: int = 8
    M: int = 4
    B: int = 16
    L: int = 32
    mode: str = "baseline"
    p: float | None = None  # defaults per mode: 0.3 gate_drop, 0.2 gate_expert_drop, else 0
    cf_train: float = 1.0
    cf_eval: float = 2.0
    alpha: float = 0.01
    jitter_eps: float = 0.01
    lr_base: float = 0.03
    warmup: int = 5000
    beta1: float = 0.9
    beta2: float = 0.99
    steps: int = 2000
    moe_layers: int = 1
    passes_per_step: int = 2
    link_bandwidth: float = 12.5e9
    per_message_latency: float = 5e-6
    compute_time_per_token: float = 5e-6
    output_path: str | None = None
    sweep_axis: str = "p"

    @property
    def hidden(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d

    def hyper(self, **override) -> HyperParams:
        kw = dict(mode=self.mode, p=self.p, cf_train=self.cf_train, cf_eval=self.cf_eval, alpha=self.alpha,
                  lr_base=self.lr_base, warmup=self.warmup, beta1=self.beta1, beta2=self.beta2,
                  steps=self.steps, jitter_eps=self.jitter_eps)
        kw.update(override)
        return HyperParams(**kw)

    @property
    def effective_p(self) -> float:
        return self.hyper().p

    def cost_params(self, M: int | None = None) -> CostParams:
        per_worker = self.B * self.L // self.M
        return CostParams(M=M or self.M, d=self.d, tokens_per_worker=per_worker,
                          link_bandwidth=self.link_bandwidth, per_message_latency=self.per_message_latency,
                          compute_time_per_token_per_layer=self.compute_time_per_token,
                          moe_layers=self.moe_layers, passes_per_step=self.passes_per_step)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT_KEYS = {"seed", "d", "d_ff", "N", "M", "B", "L", "warmup", "steps", "moe_layers", "passes_per_step"}
_STR_KEYS = {"mode", "output_path", "sweep_axis"}


def _convert(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown key")
    raw = raw.strip()
    if key == "output_path":
        return raw or None
    if key in _STR_KEYS:
        return raw
    if raw == "" and key in ("p", "d_ff"):
        return None
    try:
        if key in _INT_KEYS:
            value = int(raw, 0)
        else:
            value = float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    return value


def validate(cfg: RunConfig) -> RunConfig:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(key, msg)

    need(0 <= cfg.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
    for key in ("d", "N", "M", "B", "L", "warmup", "moe_layers", "passes_per_step"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.d_ff is None or cfg.d_ff >= 1, "d_ff", "must be >= 1")
    need(cfg.steps >= 0, "steps", "must be >= 0")
    need(cfg.mode in {m.value for m in Mode}, "mode", f"unknown mode {cfg.mode!r}")
    need(cfg.p is None or 0.0 <= cfg.p <= 1.0, "p", f"must be in [0, 1], got {cfg.p}")
    need(cfg.N % cfg.M == 0, "M", f"M={cfg.M} must divide N={cfg.N}")
    need((cfg.B * cfg.L) % cfg.M == 0, "B", "B*L must be divisible by M")
    for key in ("cf_train", "cf_eval", "lr_base", "link_bandwidth", "compute_time_per_token"):
        need(getattr(cfg, key) > 0, key, "must be > 0")
    for key in ("alpha", "jitter_eps", "per_message_latency"):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("beta1", "beta2"):
        need(0 <= getattr(cfg, key) < 1, key, "must be in [0, 1)")
    need(cfg.sweep_axis in ("p", "M"), "sweep_axis", "must be 'p' or 'M'")
    return cfg


def read_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _convert(key, raw)
    return values


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (raw strings or values)."""
    values = {}
    if path is not None:
        values.update(read_config_text(Path(path).read_text(encoding="utf-8")))
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return validate(RunConfig(**values))


# --- commands ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".6g")
    return str(v)


def simulate_bytes(cfg: RunConfig, p: float | None = None) -> float:
    """Mean per-step token bytes in the ledger over ``cfg.steps`` simulated steps.

    Capacity is unbounded here so the measurement counts the full all-to-all
    volume the cost model predicts.
    """
    M, N = cfg.M, cfg.N
    p = cfg.effective_p if p is None else p
    if cfg.steps == 0:
        return 0.0
    layers = [random_layer(N, cfg.d, cfg.hidden, cfg.seed, stream_id=100 + k) for k in range(cfg.moe_layers)]
    sim = ClusterSimulator(layers, place_experts(N, M), cfg.mode, p, seed=cfg.seed, cf=float(N),
                           jitter_eps=cfg.jitter_eps, passes_per_step=cfg.passes_per_step)
    n = cfg.B * cfg.L
    for it in range(cfg.steps):
        sim.step(it, split_batch(gaussian_tokens(n, cfg.d, cfg.seed, it), M, first_id=it * n))
    return float(sim.ledger.bytes_per_iteration(cfg.steps).mean())


def _predicted_bytes(cfg: RunConfig, p: float) -> float:
    p_eff = p if Mode(cfg.mode).drops else 0.0
    return expected_step_comm_bytes(p_eff, cfg.B, cfg.L, cfg.d, cfg.moe_layers, cfg.passes_per_step, cfg.M)


def cmd_simulate(cfg: RunConfig):
    p = cfg.effective_p
    tps = throughput_estimate(cfg.cost_params(), p, cfg.mode).tokens_per_second
    yield SIMULATE_COLUMNS
    yield (cfg.M, p, cfg.mode, tps, simulate_bytes(cfg), _predicted_bytes(cfg, p))


def _train_config(cfg: RunConfig, **hp_override) -> TrainConfig:
    return TrainConfig(seed=cfg.seed, d=cfg.d, d_ff=cfg.hidden, N=cfg.N, M=cfg.M, B=cfg.B, L=cfg.L,
                       passes_per_step=cfg.passes_per_step, hp=cfg.hyper(**hp_override))


def cmd_train(cfg: RunConfig):
    yield TRAIN_COLUMNS
    log, _ = train(_train_config(cfg))
    for r in log.rows:
        yield (r.step, r.loss, r.balance_loss, r.drop_on, r.comm_bytes, r.lr, r.expert_entropy)


def cmd_sweep(cfg: RunConfig):
    if cfg.sweep_axis == "M":
        yield SWEEP_M_COLUMNS
        p = cfg.effective_p
        for M in M_GRID:
            params = cfg.cost_params(M)
            base = throughput_estimate(params, 0.0, Mode.BASELINE).tokens_per_second
            free = no_alltoall_throughput(params)
            at_p = throughput_estimate(params, p, cfg.mode).tokens_per_second
            yield (M, M, base, free, free / base - 1.0, at_p)
        return
    yield SWEEP_P_COLUMNS
    for p in P_GRID:
        tps = throughput_estimate(cfg.cost_params(), p, cfg.mode).tokens_per_second
        log, _ = train(_train_config(cfg, p=p))
        yield (p, cfg.mode, tps, simulate_bytes(cfg, p=p), _predicted_bytes(cfg, p), log.final_eval_loss,
               log.finite)


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sweep": cmd_sweep}


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def run(command: str, cfg: RunConfig, stdout=None) -> int:
    """Execute ``command`` and write its CSV; returns the process exit code."""
    stdout = stdout or sys.stdout
    try:
        text = render_csv(COMMANDS[command](cfg))
    except GateDropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if cfg.output_path:
        try:
            Path(cfg.output_path).write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            print(f"error: cannot write {cfg.output_path}: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gatedrop", description=__doc__.splitlines()[0])
    ap.add_argument("--command", required=True, choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        ap.add_argument(*names, dest=f.name, default=None, metavar="VALUE")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, UnicodeDecodeError) as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
