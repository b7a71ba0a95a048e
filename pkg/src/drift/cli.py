"""Command-line entry point: ``drift <subcommand> ...``.

Subcommands
-----------
train              run one session from a config file, write CSV/JSON artifacts and checkpoints
eval               evaluate a checkpoint (or the scripted expert) and print metrics as JSON
bench              per-rank counted FLOPs, trainable parameters and measured fwd/bwd times
sweep              run a decay-function or r_min sweep over several seeds, aggregate to CSV
schedule-preview   print the rank schedule as CSV (epoch, rank)
checkpoint-inspect print a checkpoint's header and manifest

Exit codes: 0 success, 2 configuration error, 3 checkpoint version error,
4 corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    restore_session,
    save_session,
)
from .config import RunConfig, build_run_config, load_run_config, write_snapshot
from .harness import (
    DECAY_VARIANTS,
    ConfigError,
    DaggerSession,
    ExpertActor,
    PointReach2D,
    RandomActor,
    evaluate,
)
from .schedule import RankSchedule, schedule_table

log = logging.getLogger("drift")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERSION = 3
EXIT_CORRUPT = 4

# column contract of the emitted CSV files; extra columns come after the required ones
EPOCH_COLUMNS = ["run_id", "phase", "epoch", "rank", "batch_time_s", "loss", "nel",
                 "mode", "n_batches", "n_samples", "total_time_s"]
CHECKPOINT_COLUMNS = ["iteration", "sr", "msd_mean", "msd_std", "run_id", "nel"]
SWEEP_COLUMNS = ["axis", "value", "strategy", "seed", "iteration", "nel", "sr", "msd_mean", "msd_std",
                 "final_loss", "mbt_offline", "mbt_online", "mbt_all", "ct"]
TIMING_COLUMNS = {"batch_time_s", "total_time_s", "mbt_offline", "mbt_online", "mbt_all", "ct"}
SWEEP_AXES = ("decay_fn", "r_min")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def epoch_rows(session: DaggerSession) -> list[dict]:
    return [{"run_id": session.run_id, **dataclasses.asdict(r)} for r in session.epochs]


def checkpoint_rows(session: DaggerSession) -> list[dict]:
    return [{"run_id": session.run_id, **dataclasses.asdict(c)} for c in session.checkpoints]


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_artifacts(session: DaggerSession, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "epochs.csv", EPOCH_COLUMNS, epoch_rows(session))
    write_csv(out / "checkpoints.csv", CHECKPOINT_COLUMNS, checkpoint_rows(session))
    metrics = {
        "run_id": session.run_id,
        "strategy": session.cfg.strategy,
        "seed": session.cfg.seed,
        "gate_threshold_resolved": session.threshold,
        "r_max": session.r_max,
        **session.report().to_dict(),
    }
    (out / "metrics.json").write_text(json.dumps(_json_safe(metrics), indent=2, sort_keys=True) + "\n")
    return metrics


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _session_from_run(run: RunConfig) -> DaggerSession:
    return DaggerSession(run.session, run.env, run.net, run.run_id)


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    out = Path(args.out or run.output["dir"]) / run.run_id
    # load before touching the output directory: a bad checkpoint must leave it as it was
    if args.resume:
        session = restore_session(load_checkpoint(args.resume))
        log.info("resumed %s at stage=%s epoch=%d iteration=%d", args.resume, session.stage, session.epoch,
                 session.iteration)
    else:
        session = _session_from_run(run)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(run, out / "config.json")
    log.info("run %s: strategy=%s seed=%d r_max=%d gate threshold=%.6f (%s)", run.run_id, run.session.strategy,
             run.session.seed, session.r_max, session.threshold, run.session.gate_threshold)
    save_every = int(run.output.get("save_every") or 0)
    units = 0
    while not session.done:
        if args.stop_after is not None and units >= args.stop_after:
            break
        what = session.advance()
        units += 1
        log.debug("%s", what)
        if what.startswith("eval"):
            c = session.checkpoints[-1]
            log.info("checkpoint %d: nel=%d sr=%.3f", c.iteration, c.nel, c.sr)
        if save_every and units % save_every == 0:
            save_session(out / "session.drft", session)
    save_session(out / "session.drft", session)
    metrics = write_artifacts(session, out)
    print(json.dumps(_json_safe(metrics), sort_keys=True))
    return EXIT_OK


def _seed_list(args, n: int) -> list[int]:
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        if len(seeds) < n:
            raise ConfigError(f"--seeds lists {len(seeds)} seeds but -n is {n}")
        return seeds[:n]
    return [args.seed_base + k for k in range(n)]


def cmd_eval(args) -> int:
    env_params = {}
    if args.env_config:
        run = load_run_config(args.env_config, args.set)
        env_params = run.env
    if args.expert or args.random:
        env = PointReach2D(**env_params)
        actor = ExpertActor(1.0, env.v_max) if args.expert else RandomActor(env.v_max)
        n = args.n
        m = evaluate(actor, lambda: PointReach2D(**env_params), n, _seed_list(args, n))
        print(json.dumps(_json_safe(m.to_dict()), sort_keys=True))
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError("eval needs a checkpoint path, --expert or --random")
    ckpt = load_checkpoint(args.checkpoint)
    kind = ckpt.config.get("kind")
    if kind == "expert":
        env_params = env_params or dict(ckpt.config.get("env", {}))
        env = PointReach2D(**env_params)
        policy = ExpertActor(float(ckpt.config.get("gain", 1.0)), env.v_max)
    elif kind == "session":
        session = restore_session(ckpt)
        env_params = env_params or session.env_params
        policy = session.policy
    else:
        raise CheckpointCorruptError(f"unknown checkpoint kind {kind!r}", "config.kind")
    n = args.n
    m = evaluate(policy, lambda: PointReach2D(**env_params), n, _seed_list(args, n))
    print(json.dumps(_json_safe(m.to_dict()), sort_keys=True))
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc


def cmd_bench(args) -> int:
    from .bench import bench_table
    from .diffusion import NetConfig

    net_cfg = NetConfig(channels=tuple(_int_list(args.channels)))
    ranks = _int_list(args.ranks) if args.ranks else None
    rows = bench_table(args.mode, ranks, net_cfg, args.batches, args.warmup, args.batch_size, args.repeats)
    cols = [f.name for f in dataclasses.fields(rows[0])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in cols])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def sweep_values(axis: str, r_max: int) -> list:
    """Default sweep points: the six decay variants plus the full-rank baseline, or r_min at p/12..p/1.5."""
    if axis == "decay_fn":
        return [*DECAY_VARIANTS, "hg_full"]
    return [max(1, round(r_max / d)) for d in (12, 6, 3, 1.5)]


def _sweep_run(base: dict, axis: str, value, seed: int) -> tuple[dict, DaggerSession]:
    doc = json.loads(json.dumps(base))
    sess = doc.setdefault("session", {})
    sess["seed"] = seed
    if axis == "decay_fn":
        if value == "hg_full":
            sess["strategy"] = "hg_full"
        else:
            sess["decay"] = value
    else:
        sess["r_min"] = int(value)
    doc.setdefault("output", {})["run_id"] = f"{axis}={value}_s{seed}"
    run = build_run_config(doc)
    return doc, _session_from_run(run).run()


def cmd_sweep(args) -> int:
    run = load_run_config(args.config, args.set)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}")
    base = run.to_dict()
    if args.values:
        values = args.values.split(",")
        if args.axis == "r_min":
            values = _int_list(args.values)
    else:
        probe = _session_from_run(build_run_config({**base, "session": {**base["session"], "offline_epochs": 0,
                                                                        "online_iters": 0}}))
        values = sweep_values(args.axis, probe.r_max)
    seeds = _int_list(args.seeds)
    jobs = [(v, s) for v in values for s in seeds]
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(lambda job: _sweep_run(base, args.axis, *job), jobs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, epochs = [], []
    for (value, seed), (_, session) in zip(jobs, results):
        rep = session.report()
        for c in session.checkpoints:
            rows.append({"axis": args.axis, "value": value, "strategy": session.cfg.strategy, "seed": seed,
                         "iteration": c.iteration, "nel": c.nel, "sr": c.sr, "msd_mean": c.msd_mean,
                         "msd_std": c.msd_std, "final_loss": rep.final_loss, "mbt_offline": rep.mbt_offline,
                         "mbt_online": rep.mbt_online, "mbt_all": rep.mbt_all, "ct": rep.ct})
        epochs.extend(epoch_rows(session))
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    write_csv(out / "sweep_epochs.csv", EPOCH_COLUMNS, epochs)
    write_snapshot(run, out / "config.json")
    print(f"{len(rows)} rows -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_schedule_preview(args) -> int:
    try:
        if args.decay == "constant":
            sched = RankSchedule("constant", args.r_max, args.r_min, args.epochs)
        elif args.decay in DECAY_VARIANTS:
            sched = RankSchedule(r_max=args.r_max, r_min=args.r_min, total_epochs=args.epochs, t_mid=args.t_mid,
                                 **DECAY_VARIANTS[args.decay])
        else:
            raise ConfigError(f"unknown decay {args.decay!r}; expected constant or one of {list(DECAY_VARIANTS)}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "rank"])
    for i, r in schedule_table(sched):
        w.writerow([i, r])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_checkpoint_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    info = {
        "version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "arrays": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in sorted(ckpt.arrays.items())},
        "meta_keys": sorted(ckpt.meta),
    }
    if "counters" in ckpt.meta:
        info["counters"] = ckpt.meta["counters"]
    print(json.dumps(_json_safe(info), indent=None if args.compact else 2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drift", description="Rank-modulated diffusion-policy DAgger experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for per-unit lines)")
    sub = p.add_subparsers(dest="command", required=True)

    def add_set(sp):
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable); values parse as YAML")

    t = sub.add_parser("train", help="run one session")
    t.add_argument("config", help="YAML or JSON run config")
    add_set(t)
    t.add_argument("--out", help="output root (default: output.dir from the config)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a session checkpoint")
    t.add_argument("--stop-after", type=int, metavar="UNITS",
                   help="stop after this many units of work (epochs, iterations, evaluations)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint", nargs="?", help="session or expert checkpoint")
    e.add_argument("--env-config", help="config whose env section overrides the checkpoint's")
    add_set(e)
    e.add_argument("-n", type=int, default=50, help="number of rollouts (default 50)")
    e.add_argument("--seeds", help="comma-separated environment seeds")
    e.add_argument("--seed-base", type=int, default=1_000_000, help="seeds are seed_base + k when --seeds is absent")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    g.add_argument("--random", action="store_true", help="evaluate a uniform random policy instead")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-rank FLOPs, parameters and timings")
    b.add_argument("--mode", choices=("factored", "lora", "plain"), default="factored")
    b.add_argument("--ranks", help="comma-separated ranks (default p, p/2, p/4, p/8)")
    b.add_argument("--channels", default="32,64")
    b.add_argument("--batches", type=int, default=50, help="warm batches per rank (default 50)")
    b.add_argument("--warmup", type=int, default=5, help="discarded warmup batches (default 5)")
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--repeats", type=int, default=1, help="min over this many runs of each batch")
    b.add_argument("--out", help="also write the CSV here")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="decay-function or r_min sweep")
    s.add_argument("config")
    add_set(s)
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", help="comma-separated values (default: the six decays + hg_full, or p/12..p/1.5)")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("schedule-preview", help="print the rank schedule as CSV")
    sp.add_argument("--decay", default="sig0.5", help=f"constant or one of {', '.join(DECAY_VARIANTS)}")
    sp.add_argument("--r-max", type=int, default=96)
    sp.add_argument("--r-min", type=int, default=16)
    sp.add_argument("--epochs", type=int, default=50, help="schedule length T")
    sp.add_argument("--t-mid", type=int, default=None, help="sigmoid midpoint (default T // 2)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_schedule_preview)

    ci = sub.add_parser("checkpoint-inspect", help="print checkpoint header and manifest")
    ci.add_argument("checkpoint")
    ci.add_argument("--compact", action="store_true")
    ci.set_defaults(func=cmd_checkpoint_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointVersionError as exc:
        print(f"checkpoint version error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except CheckpointCorruptError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
