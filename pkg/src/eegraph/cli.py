"""Command-line experiment driver for the two-phase pipeline.

Subcommands:

* ``synth-gen``   write a synthetic recording (plus clarity sidecar)
* ``train-gcn``   phase 1: classifier training + mask pruning schedule
* ``train-rl``    phase 2: feature extraction, agent training, evaluation
* ``evaluate``    re-evaluate a saved agent on a dataset's test split
* ``report``      merge per-run metric tables with Mean/Std footers

Every run directory receives the resolved configuration, the seeds and a
content hash of the input data, so runs are reproducible bit-for-bit.
Metric tables carry no timestamps or absolute paths: identical seeds give
byte-identical tables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from eegraph.checkpoint import content_hash, hash_bytes, write_json
from eegraph.data import (
    SyntheticSpec,
    generate_synthetic,
    ingest,
    points_dataset,
    preprocess,
    save_recording_text,
    slice_trials,
    split_points,
)
from eegraph.dqn import (
    DuelingConfig,
    TrainerConfig,
    build_buffer,
    compute_metrics,
    evaluate,
    load_agent_checkpoint,
    save_agent_checkpoint,
    train_dqn,
)
from eegraph.env import RewardConfig, build_episodes, split_episodes
from eegraph.gcn import (
    FeatureExtractor,
    GcnClassifier,
    GcnConfig,
    GcnTrainConfig,
    load_gcn_checkpoint,
    save_gcn_checkpoint,
)
from eegraph.pruning import PruningConfig, run_glt

DEFAULT_OUT_ROOT_ENV = "EEGRAPH_OUTPUT_ROOT"

RIGHT_GRID = (5.0, 10.0, 20.0)
WRONG_GRID = (-10.0, -20.0, -30.0, -40.0)
HORIZON_GRID = (10, 20, 30, 40)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _out_dir(args) -> Path:
    root = Path(args.out_root or os.environ.get(DEFAULT_OUT_ROOT_ENV, "runs"))
    run_dir = root / args.name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _load_recordings(args):
    """Recordings plus a provenance hash (file bytes or synthetic spec)."""
    if args.data:
        recs = []
        hashes = {}
        for path in args.data:
            recs.extend(ingest(path))
            hashes[Path(path).name] = content_hash(path)
        if args.subject:
            recs = [r for r in recs if r.subject == args.subject]
            if not recs:
                raise SystemExit(f"no recordings for subject {args.subject!r}")
        return recs, hashes
    spec = SyntheticSpec(n_trials=args.synth_trials, clear_fraction=args.synth_clear,
                         noise_sigma=args.synth_noise, seed=args.synth_seed)
    dataset = generate_synthetic(spec)
    spec_json = json.dumps(spec.__dict__, sort_keys=True).encode()
    return [dataset.recording], {"synthetic": hash_bytes(spec_json)}


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", nargs="+", help="recording file(s), text or EDF")
    p.add_argument("--subject", help="keep only this subject id")
    p.add_argument("--synth-trials", type=int, default=200)
    p.add_argument("--synth-clear", type=float, default=0.5)
    p.add_argument("--synth-noise", type=float, default=0.3)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--notch-freq", type=float, default=50.0)
    p.add_argument("--notch-q", type=float, default=30.0)


def _add_run_args(p: argparse.ArgumentParser, default_name: str) -> None:
    p.add_argument("--out-root", default=None,
                   help=f"output root (default ${DEFAULT_OUT_ROOT_ENV} or ./runs)")
    p.add_argument("--name", default=default_name, help="run directory name")


# ---------------------------------------------------------------------------
# synth-gen


def cmd_synth_gen(args) -> int:
    spec = SyntheticSpec(n_trials=args.trials, clear_fraction=args.clear_fraction,
                         noise_sigma=args.noise_sigma, seed=args.seed)
    dataset = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_recording_text(out, dataset.recording)
    clarity_path = out.with_suffix(out.suffix + ".clarity")
    np.savetxt(clarity_path, dataset.clear.astype(np.int8), fmt="%d")
    print(f"wrote {out} ({spec.n_trials} trials) and {clarity_path}")
    return 0


# ---------------------------------------------------------------------------
# train-gcn


def cmd_train_gcn(args) -> int:
    run_dir = _out_dir(args)
    recordings, data_hashes = _load_recordings(args)

    trials, labels = [], []
    for rec in recordings:
        clean = preprocess(rec, notch_freq=args.notch_freq, q=args.notch_q)
        t, l = slice_trials(clean)
        trials.extend(t)
        labels.extend(l)
    if not trials:
        raise SystemExit("dataset contains no trials")
    rate = recordings[0].sample_rate
    x, y = points_dataset(trials, labels, rate, start_s=args.window[0],
                          end_s=args.window[1], stride=args.stride)
    train_idx, val_idx = split_points(len(x), args.val_fraction, args.split_seed)

    config = GcnConfig(n_nodes=recordings[0].n_channels,
                       conv_channels=args.conv_channels, cheb_order=args.cheb_order,
                       fc_hidden=args.fc_hidden, dropout_rate=args.dropout)
    model = GcnClassifier(config, seed=args.seed)
    train_cfg = GcnTrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               lr=args.lr, seed=args.seed)
    prune_cfg = PruningConfig(prune_rate=args.prune_rate,
                              target_density=args.target_density)

    resolved = {
        "command": "train-gcn",
        "data_hashes": data_hashes,
        "seeds": {"model": args.seed, "split": args.split_seed},
        "window_s": list(args.window), "stride": args.stride,
        "val_fraction": args.val_fraction,
        "model": {"conv_channels": list(config.conv_channels),
                  "cheb_order": config.cheb_order,
                  "fc_hidden": list(config.fc_hidden),
                  "dropout_rate": config.dropout_rate},
        "train": {"epochs": train_cfg.epochs, "batch_size": train_cfg.batch_size,
                  "lr": train_cfg.lr},
        "pruning": {"prune_rate": prune_cfg.prune_rate,
                    "target_density": prune_cfg.target_density},
        "n_points": {"train": len(train_idx), "val": len(val_idx)},
    }
    write_json(run_dir / "config.json", resolved)

    def save_level(index, level, state):
        path = run_dir / f"level_{index:02d}_density_{level.density:.6f}.npz"
        snapshot = GcnClassifier(config)
        snapshot.load_state(state)
        save_gcn_checkpoint(path, snapshot, extra_meta={
            "val_accuracy": level.val_accuracy, "level": index})
        return path.name

    schedule = run_glt(model, x[train_idx], y[train_idx], x[val_idx], y[val_idx],
                       prune_cfg, train_cfg, save_fn=save_level, verbose=not args.quiet)

    extractor_level = schedule.extractor_level
    manifest = {
        "prune_rate": schedule.prune_rate,
        "target_density": schedule.target_density,
        "aborted": schedule.aborted,
        "extractor": extractor_level.checkpoint_path,
        "levels": [{"density": lvl.density, "n_live": lvl.n_live,
                    "val_accuracy": lvl.val_accuracy,
                    "checkpoint": lvl.checkpoint_path} for lvl in schedule.levels],
    }
    write_json(run_dir / "manifest.json", manifest)
    print(f"{len(schedule.levels)} density level(s); extractor at "
          f"{extractor_level.density:.4%} (val acc {extractor_level.val_accuracy:.4f})")
    print(f"manifest: {run_dir / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------------------
# feature extraction shared by train-rl / evaluate


def _episode_sets(args, extractor: FeatureExtractor, horizon: int):
    recordings, data_hashes = _load_recordings(args)
    rate = recordings[0].sample_rate
    trial_points = int(round((args.window[1] - args.window[0]) * rate))
    if horizon > trial_points:
        raise SystemExit(f"horizon {horizon} exceeds the {trial_points}-point trial window")
    feats, labels = [], []
    for rec in recordings:
        clean = preprocess(rec, notch_freq=args.notch_freq, q=args.notch_q)
        trials, trial_labels = slice_trials(clean)
        for trial, label in zip(trials, trial_labels):
            x = trial.T[int(round(args.window[0] * rate)):
                        int(round(args.window[1] * rate))]
            feats.append(extractor.features(x))
            labels.append(label)
    episodes = build_episodes(feats, labels, horizon)
    if args.episode_limit is not None:
        episodes = episodes[:args.episode_limit]
    subject = args.subject or recordings[0].subject
    return episodes, data_hashes, subject


def _metric_row(subject, reward: RewardConfig, reps_stats) -> dict:
    keys = ("val_accuracy", "accuracy", "f1", "time", "reward")
    row = {
        "subject": subject,
        "r_right": reward.r_right, "r_wrong": reward.r_wrong,
        "r_skip": reward.r_skip, "horizon": reward.horizon,
        "reps": len(reps_stats),
    }
    for key in keys:
        vals = np.array([s[key] for s in reps_stats])
        row[f"{key}_mean"] = float(vals.mean())
        row[f"{key}_std"] = float(vals.std())
    return row


_TABLE_COLUMNS = ("subject", "r_right", "r_wrong", "r_skip", "horizon", "reps",
                  "val_accuracy_mean", "val_accuracy_std", "accuracy_mean",
                  "accuracy_std", "f1_mean", "f1_std", "time_mean", "time_std",
                  "reward_mean", "reward_std")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_metrics_table(path, rows: list[dict]) -> None:
    lines = ["\t".join(_TABLE_COLUMNS)]
    for row in rows:
        lines.append("\t".join(_format_cell(row[c]) for c in _TABLE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_table(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        if not line.strip() or line.startswith(("Mean", "Std")):
            continue
        rows.append(dict(zip(header, line.split("\t"))))
    return rows, header


def cmd_train_rl(args) -> int:
    run_dir = _out_dir(args)
    model, gcn_meta = load_gcn_checkpoint(args.extractor)
    extractor = model.freeze()

    # sweep plan: one axis varies, the rest stay at their defaults
    base = dict(r_right=args.r_right, r_wrong=args.r_wrong,
                r_skip=args.r_skip, horizon=args.horizon)
    sweeps: dict[str, list[RewardConfig]] = {}
    axes = ([args.sweep] if args.sweep not in (None, "all")
            else (["rright", "rwrong", "horizon"] if args.sweep == "all" else []))
    if not axes:
        sweeps["single"] = [RewardConfig(**base)]
    for axis in axes:
        if axis == "rright":
            sweeps["rright"] = [RewardConfig(**{**base, "r_right": v})
                                for v in args.r_right_grid]
        elif axis == "rwrong":
            sweeps["rwrong"] = [RewardConfig(**{**base, "r_wrong": v})
                                for v in args.r_wrong_grid]
        elif axis == "horizon":
            sweeps["horizon"] = [RewardConfig(**{**base, "horizon": v})
                                 for v in args.horizon_grid]

    dueling_cfg = DuelingConfig(input_dim=extractor.feature_dim, trunk=args.trunk,
                                head_hidden=args.head_hidden)
    trainer_base = TrainerConfig(gamma=args.gamma, epochs=args.epochs,
                                 batch_size=args.batch_size,
                                 target_update_every=args.target_update,
                                 lr=args.lr, l2_lambda=args.l2)

    resolved = {
        "command": "train-rl",
        "extractor": Path(args.extractor).name,
        "extractor_density": gcn_meta.get("density"),
        "seeds": {"split_base": args.split_seed, "reps": args.reps},
        "window_s": list(args.window),
        "reward_defaults": base,
        "trainer": {"gamma": trainer_base.gamma, "epochs": trainer_base.epochs,
                    "batch_size": trainer_base.batch_size,
                    "target_update_every": trainer_base.target_update_every,
                    "lr": trainer_base.lr, "l2_lambda": trainer_base.l2_lambda},
        "net": {"trunk": list(args.trunk), "head_hidden": args.head_hidden},
        "sweep": args.sweep or "none",
    }

    feature_cache: dict[int, list] = {}
    all_rows = {}
    for sweep_name, configs in sweeps.items():
        rows = []
        for reward in configs:
            if reward.horizon not in feature_cache:
                feature_cache[reward.horizon] = _episode_sets(args, extractor,
                                                              reward.horizon)
            episodes, data_hashes, subject = feature_cache[reward.horizon]
            resolved["data_hashes"] = data_hashes
            reps_stats = []
            best = None
            for rep in range(args.reps):
                split_seed = args.split_seed + rep
                train_eps, val_eps, test_eps = split_episodes(episodes, split_seed)
                buffer = build_buffer(train_eps, reward, seed=split_seed)
                cfg = TrainerConfig(gamma=trainer_base.gamma, epochs=trainer_base.epochs,
                                    batch_size=trainer_base.batch_size,
                                    target_update_every=trainer_base.target_update_every,
                                    lr=trainer_base.lr, l2_lambda=trainer_base.l2_lambda,
                                    seed=split_seed)
                net = train_dqn(buffer, cfg, config=dueling_cfg)
                val_results = [evaluate(net, ep, reward) for ep in val_eps]
                test_results = [evaluate(net, ep, reward) for ep in test_eps]
                val_m = compute_metrics(val_results)
                test_m = compute_metrics(test_results)
                reps_stats.append({
                    "val_accuracy": val_m.accuracy, "accuracy": test_m.accuracy,
                    "f1": test_m.macro_f1, "time": test_m.mean_classification_time,
                    "reward": float(np.mean([r.cumulative_reward for r in test_results])),
                })
                tag = (f"r{reward.r_right:g}_w{reward.r_wrong:g}_h{reward.horizon}"
                       f"_rep{rep}")
                lines = ["episode\tlabel\tpredicted\ttime\treward"]
                for i, r in enumerate(test_results):
                    lines.append(f"{i}\t{r.label}\t{r.predicted}"
                                 f"\t{r.classification_time}\t{r.cumulative_reward:.6f}")
                (run_dir / f"eval_{tag}.tsv").write_text("\n".join(lines) + "\n")
                if best is None or val_m.accuracy > best[0]:
                    best = (val_m.accuracy, net, cfg, rep)
            row = _metric_row(subject, reward, reps_stats)
            rows.append(row)
            agent_path = run_dir / (f"agent_r{reward.r_right:g}_w{reward.r_wrong:g}"
                                    f"_h{reward.horizon}.npz")
            save_agent_checkpoint(agent_path, best[1], best[2], reward,
                                  extra_meta={"subject": subject,
                                              "val_accuracy": best[0],
                                              "best_rep": best[3],
                                              "window_s": list(args.window),
                                              "split_seed": args.split_seed + best[3]})
            if not args.quiet:
                print(f"r_right={reward.r_right:g} r_wrong={reward.r_wrong:g} "
                      f"H={reward.horizon}: acc {row['accuracy_mean']:.4f} "
                      f"time {row['time_mean']:.2f}")
        table_path = run_dir / (f"metrics_{sweep_name}.tsv" if sweep_name != "single"
                                else "metrics.tsv")
        write_metrics_table(table_path, rows)
        all_rows[sweep_name] = rows
    write_json(run_dir / "config.json", resolved)
    write_json(run_dir / "metrics.json", all_rows)
    print(f"metrics written under {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    net, meta = load_agent_checkpoint(args.agent)
    model, _ = load_gcn_checkpoint(args.extractor)
    extractor = model.freeze()
    reward = RewardConfig(**meta["reward"])
    args.window = meta.get("window_s", [0.0, 4.0])
    episodes, _, subject = _episode_sets(args, extractor, reward.horizon)
    split_seed = args.split_seed if args.split_seed is not None \
        else meta.get("split_seed", 0)
    _, _, test_eps = split_episodes(episodes, split_seed)
    results = [evaluate(net, ep, reward) for ep in test_eps]
    m = compute_metrics(results)
    print(f"subject {subject}: accuracy {m.accuracy:.4f}  macro F1 {m.macro_f1:.4f}  "
          f"mean time {m.mean_classification_time:.2f}  ({m.n_episodes} episodes)")
    if args.out:
        write_json(args.out, {
            "subject": subject, "accuracy": m.accuracy, "macro_f1": m.macro_f1,
            "mean_time": m.mean_classification_time, "n_episodes": m.n_episodes})
    return 0


def cmd_report(args) -> int:
    tables = []
    header = None
    for run in args.runs:
        run = Path(run)
        paths = sorted(run.glob("metrics*.tsv")) if run.is_dir() else [run]
        for path in paths:
            rows, hdr = read_metrics_table(path)
            if header is None:
                header = hdr
            elif hdr != header:
                raise SystemExit(f"{path}: column schema differs from the first table")
            tables.extend(rows)
    if not tables:
        raise SystemExit("no metric rows found")
    numeric = [c for c in header if c not in ("subject", "reps")]
    lines = ["\t".join(header)]
    for row in tables:
        lines.append("\t".join(row[c] for c in header))
    means, stds = {}, {}
    for c in numeric:
        vals = np.array([float(row[c]) for row in tables])
        means[c] = vals.mean()
        stds[c] = vals.std()
    lines.append("\t".join(
        ["Mean"] + [f"{means[c]:.6f}" if c in numeric else "" for c in header[1:]]))
    lines.append("\t".join(
        ["Std"] + [f"{stds[c]:.6f}" if c in numeric else "" for c in header[1:]]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegraph",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic recording")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--clear-fraction", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-gcn", help="phase 1: classifier + pruning schedule")
    _add_data_args(p)
    _add_run_args(p, "gcn")
    p.add_argument("--window", type=float, nargs=2, default=(1.0, 3.0),
                   metavar=("START_S", "END_S"))
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=1000,
                   help="training epochs per density level")
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--conv-channels", type=_int_tuple,
                   default=(1, 16, 32, 64, 128, 256, 512))
    p.add_argument("--cheb-order", type=int, default=5)
    p.add_argument("--fc-hidden", type=_int_tuple, default=(1024, 2048))
    p.add_argument("--prune-rate", type=float, default=0.10)
    p.add_argument("--target-density", type=float, default=0.1339)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_gcn)

    p = sub.add_parser("train-rl", help="phase 2: agent training + evaluation")
    _add_data_args(p)
    _add_run_args(p, "rl")
    p.add_argument("--extractor", required=True, help="phase-1 checkpoint (.npz)")
    p.add_argument("--window", type=float, nargs=2, default=(0.0, 4.0),
                   metavar=("START_S", "END_S"))
    p.add_argument("--r-right", type=float, default=10.0)
    p.add_argument("--r-wrong", type=float, default=-10.0)
    p.add_argument("--r-skip", type=float, default=-0.1)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--sweep", choices=("rright", "rwrong", "horizon", "all"))
    p.add_argument("--r-right-grid", type=_float_tuple, default=RIGHT_GRID)
    p.add_argument("--r-wrong-grid", type=_float_tuple, default=WRONG_GRID)
    p.add_argument("--horizon-grid", type=_int_tuple, default=HORIZON_GRID)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=63)
    p.add_argument("--target-update", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--trunk", type=_int_tuple, default=(1024, 2048))
    p.add_argument("--head-hidden", type=int, default=64)
    p.add_argument("--reps", type=int, default=10,
                   help="independent repetitions with shifted split seeds")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--episode-limit", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("evaluate", help="evaluate a saved agent on the test split")
    _add_data_args(p)
    p.add_argument("--agent", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--episode-limit", type=int)
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge metric tables across runs")
    p.add_argument("runs", nargs="+", help="run directories or metrics .tsv files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
