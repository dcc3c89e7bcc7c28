"""Command-line interface: prepare | train | eval | predict | plot.

Run directories live under ``$BPSGCN_RUNS`` (default ``./runs``). Exit codes
are 0 on success, 2 for usage, configuration or input errors and 3 when
training or evaluation fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .clustering import TrainingError
from .data import (
    DataFormatError,
    EmptySceneError,
    SplitManifest,
    Window,
    gen_synthetic,
    leave_one_out,
    load_scene,
    make_windows,
)
from .evaluation import EmptyTestSetError, clustering_scores, evaluate, format_mean_std, summarize_runs
from .pipeline import ABLATIONS, BPSGCN, ConfigError, TrainConfig, new_bundle, train
from .predictor import EmptyRepositoryError

log = logging.getLogger("bpsgcn")

RUNS_ENV = "BPSGCN_RUNS"
SPLITS = ("train", "val", "test")
CACHE_FILE = "windows.npz"
PREDICTION_HEADER = "# bpsgcn-predictions v1"
METRIC_FIELDS = ("stage", "epoch", "loss", "softdtw", "elbo", "cluster", "prediction", "ade", "fde")


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str | None
    seed: int | None
    output_dir: str
    started: str
    finished: str | None = None
    extra: dict = field(default_factory=dict)

    def write(self, directory):
        self.finished = _now()
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def runs_root():
    return Path(os.environ.get(RUNS_ENV, "runs"))


def _fmt(value):
    if value is None or value == "":
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------- window cache


def save_windows(path, splits, meta):
    """``splits`` maps split name to ``(windows, labels)``; labels are per-agent strings."""
    arrays = {}
    for name, (windows, labels) in splits.items():
        sizes = [w.n_agents for w in windows]
        t_obs = windows[0].t_obs if windows else 0
        t_fut = windows[0].t_fut if windows else 0
        arrays[f"{name}.observed"] = np.concatenate([w.observed for w in windows]) if windows else np.zeros((0, t_obs, 2))
        arrays[f"{name}.future"] = np.concatenate([w.future for w in windows]) if windows else np.zeros((0, t_fut, 2))
        arrays[f"{name}.sizes"] = np.asarray(sizes, dtype=np.int64)
        arrays[f"{name}.start"] = np.asarray([w.start_frame for w in windows], dtype=np.int64)
        arrays[f"{name}.scene"] = np.asarray([w.scene for w in windows], dtype=str)
        arrays[f"{name}.agent_ids"] = np.asarray([a for w in windows for a in w.agent_ids], dtype=str)
        arrays[f"{name}.labels"] = np.asarray(labels, dtype=str)
    return checkpoint.save_archive(path, arrays, meta)


def load_windows(path):
    """Returns ``({split: (windows, labels)}, meta)``."""
    arrays, meta = checkpoint.load_archive(path)
    out = {}
    for name in SPLITS:
        if f"{name}.sizes" not in arrays:
            continue
        offsets = np.concatenate([[0], np.cumsum(arrays[f"{name}.sizes"])]).astype(int)
        ids = arrays[f"{name}.agent_ids"].tolist()
        windows = []
        for i in range(len(offsets) - 1):
            lo, hi = offsets[i], offsets[i + 1]
            windows.append(Window(arrays[f"{name}.observed"][lo:hi], arrays[f"{name}.future"][lo:hi], tuple(ids[lo:hi]),
                                  int(arrays[f"{name}.start"][i]), str(arrays[f"{name}.scene"][i])))
        out[name] = (windows, arrays[f"{name}.labels"].tolist())
    return out, meta


def _windows_from_scenes(scenes, t_obs, t_fut, stride):
    windows, labels = [], []
    for scene in scenes:
        lookup = {t.agent_id: "" if t.label is None else str(t.label) for t in scene.tracks}
        for w in make_windows(scene, t_obs, t_fut, stride):
            windows.append(w)
            labels.extend(lookup[a] for a in w.agent_ids)
    return windows, labels


# ---------------------------------------------------------------- prepare


def cmd_prepare(args):
    out = Path(args.out) if args.out else runs_root() / "data"
    params = {"t_obs": args.t_obs, "t_fut": args.t_fut, "stride": args.stride}
    digest = hashlib.sha256()
    if args.synthetic:
        params.update(mode="synthetic", agents=args.agents, val_agents=args.val_agents,
                      test_agents=args.test_agents, seed=args.seed)
        scenes = {
            "train": [gen_synthetic(n_agents=args.agents, seed=args.seed)[0]],
            "val": [gen_synthetic(n_agents=args.val_agents, seed=args.seed + 1)[0]],
            "test": [gen_synthetic(n_agents=args.test_agents, seed=args.seed + 2)[0]],
        }
        manifest = SplitManifest(train=["synthetic:train"], val=["synthetic:val"], test=["synthetic:test"], format="synthetic")
    else:
        if not args.data:
            raise UsageError("either --synthetic or --data DIR is required")
        root = Path(args.data)
        if not root.is_dir():
            raise UsageError(f"data directory not found: {root}")
        files = sorted(str(p) for p in root.rglob("*.txt"))
        if not files:
            raise UsageError(f"no .txt trajectory files under {root}")
        if not args.test_scene:
            raise UsageError("--test-scene is required with --data")
        try:
            manifest = leave_one_out(files, args.test_scene, args.val_scene, args.format)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        for f in files:
            digest.update(f.encode())
            digest.update(Path(f).read_bytes())
        params.update(mode=args.format, test_scene=args.test_scene, val_scene=args.val_scene)
        scenes = {split: [load_scene(f, args.format) for f in getattr(manifest, split)] for split in SPLITS}
    digest.update(json.dumps(params, sort_keys=True).encode())
    key = digest.hexdigest()[:16]

    cache = out / CACHE_FILE
    info_path = out / "cache.json"
    if cache.exists() and info_path.exists() and json.loads(info_path.read_text()).get("hash") == key:
        print(f"cache,{cache},{key},unchanged")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    splits = {split: _windows_from_scenes(scenes[split], args.t_obs, args.t_fut, args.stride) for split in SPLITS}
    if not splits["train"][0]:
        raise UsageError("no training windows could be cut from the data")
    save_windows(cache, splits, {"hash": key, "params": params})
    manifest.save(out / "split.json")
    info_path.write_text(json.dumps({"hash": key, "params": params, "windows": {s: len(splits[s][0]) for s in SPLITS}},
                                    indent=2, sort_keys=True) + "\n")
    RunManifest("prepare", None, key, args.seed if args.synthetic else None, str(out), _now()).write(out)
    print(f"cache,{cache},{key},written")
    return 0


# ---------------------------------------------------------------- train


def _resolve_config(args):
    cfg = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    for name in ("seed", "k", "ablation"):
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    return TrainConfig.from_dict(cfg)


def _load_cache(path):
    path = Path(path)
    if path.is_dir():
        path = path / CACHE_FILE
    if not path.exists():
        raise UsageError(f"window cache not found: {path}")
    splits, _ = load_windows(path)
    return splits, path


def _run_dir(args, cfg):
    if args.run:
        path = Path(args.run)
        return path if path.is_absolute() or len(path.parts) > 1 else runs_root() / path
    return runs_root() / f"run-{cfg.digest()}"


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in METRIC_FIELDS])


def cmd_train(args):
    cfg = _resolve_config(args)
    stages = "".join(sorted(set(args.stages)))
    if not stages or set(stages) - set("abc"):
        raise UsageError("--stages must be a non-empty subset of 'abc'")
    splits, cache = _load_cache(args.data)
    train_windows = splits["train"][0]
    val_windows = splits.get("val", ([], []))[0] or None
    run_dir = _run_dir(args, cfg)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    manifest = RunManifest("train", args.config, cfg.digest(), cfg.seed, str(run_dir), _now(),
                           extra={"data": str(cache), "stages": stages})

    torch.set_num_threads(1)
    if args.resume:
        bundle = BPSGCN.load(Path(args.resume))
    elif stages[0] != "a":
        raise UsageError("stages after 'a' need --resume MODEL")
    else:
        cfg.validate()
        bundle = new_bundle(train_windows, cfg)
    history = []

    def stage_a_epoch(row, vrnn):
        bundle.save(ckpt_dir / "stage_a_epoch.npz")

    try:
        for stage in stages:
            train(train_windows, cfg, val_windows, stages=stage, history=history, bundle=bundle, on_epoch=stage_a_epoch)
            bundle.save(ckpt_dir / f"stage_{stage}.npz")
    except (TrainingError, FloatingPointError) as exc:
        bundle.save(ckpt_dir / "last_good.npz")
        write_metrics(run_dir / "metrics.csv", history)
        manifest.extra["error"] = str(exc)
        manifest.write(run_dir)
        raise
    bundle.save(run_dir / "model.npz")
    write_metrics(run_dir / "metrics.csv", history)
    manifest.write(run_dir)
    print(f"run,{run_dir}")
    return 0


# ---------------------------------------------------------------- eval


def _open_run(run):
    path = Path(run)
    if not path.exists() and not path.is_absolute() and len(path.parts) == 1:
        path = runs_root() / path
    model = path / "model.npz"
    if not model.exists():
        raise UsageError(f"no trained model in {path}")
    bundle = BPSGCN.load(model)
    info = json.loads((path / "manifest.json").read_text()) if (path / "manifest.json").exists() else {}
    return path, bundle, info


def _eval_split(args, info):
    data = args.data or info.get("extra", {}).get("data")
    if not data:
        raise UsageError("--data is required (the run manifest does not name a cache)")
    splits, cache = _load_cache(data)
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} missing from {cache}")
    return splits[args.split], cache


def _require_predictor(bundle):
    if bundle.predictor is None:
        raise UsageError("model has no trained predictor (stage c was not run)")


def cmd_eval(args):
    torch.set_num_threads(1)
    run_dir, bundle, info = _open_run(args.run)
    _require_predictor(bundle)
    (windows, labels), cache = _eval_split(args, info)
    seed = bundle.cfg.seed if args.seed is None else args.seed
    out = run_dir / "eval"
    out.mkdir(exist_ok=True)
    reports = [evaluate(bundle, windows, args.samples, seed=seed + r, scale=bundle.cfg.scale) for r in range(args.repeats)]

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("repeat", "seed", "n_samples", "n_windows", "ade", "fde"))
        for r, rep in enumerate(reports):
            writer.writerow((r, seed + r, args.samples, len(windows), _fmt(rep.ade), _fmt(rep.fde)))
    with open(out / "windows.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("window", "start_frame", "n_agents", "ade", "fde"))
        for i, (w, (ade, fde, n)) in enumerate(zip(windows, reports[0].per_window)):
            writer.writerow((i, w.start_frame, int(n), _fmt(ade), _fmt(fde)))

    pred_labels = bundle.hard_labels(windows)
    ari, sil = None, None
    if labels and all(labels):
        ari, sil = clustering_scores(pred_labels, np.asarray(labels), bundle.latents(windows))
    with open(out / "clusters.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("window", "agent_id", "cluster", "true_label"))
        flat = [(i, a) for i, w in enumerate(windows) for a in w.agent_ids]
        for (i, agent), lab, truth in zip(flat, pred_labels, labels or [""] * len(flat)):
            writer.writerow((i, agent, int(lab), truth))
    with open(out / "clusters_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("metric", "value"))
        writer.writerows((("k", bundle.clusters.k), ("ari", _fmt(ari)), ("silhouette", _fmt(sil))))

    summary = summarize_runs(reports)
    summary.update(n_samples=args.samples, split=args.split, seed=seed, ari=ari, silhouette=sil,
                   ade=format_mean_std(summary["ade_mean"], summary["ade_std"]),
                   fde=format_mean_std(summary["fde_mean"], summary["fde_std"]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    RunManifest("eval", None, bundle.cfg.digest(), seed, str(out), _now(), extra={"data": str(cache)}).write(out)
    print("metric,mean,std")
    print(f"ade,{summary['ade_mean']:.6f},{summary['ade_std']:.6f}")
    print(f"fde,{summary['fde_mean']:.6f},{summary['fde_std']:.6f}")
    if ari is not None:
        print(f"ari,{ari:.6f},")
    return 0


# ---------------------------------------------------------------- predict


def write_predictions(path, bundle, windows, n_samples, seed):
    """Columnar text dump.

    After the version header, every row is
    ``record,window,agent_id,goal,sample,step,x,y,sigma_x,sigma_y,rho``.
    ``sample`` rows hold one sampled absolute position. ``gaussian`` rows hold
    the mean absolute position of goal hypothesis ``goal`` at ``step`` and the
    per-step displacement spread (``sigma_*``, ``rho``); ``sample`` is empty.
    Coordinates are in scene units.
    """
    from .evaluation import window_samples

    scale = bundle.cfg.scale
    with open(path, "w", newline="") as fh:
        fh.write(PREDICTION_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("record", "window", "agent_id", "goal", "sample", "step", "x", "y", "sigma_x", "sigma_y", "rho"))
        for w_idx, window in enumerate(windows):
            dists = bundle.distributions(window)
            origin = window.observed[:, -1] * scale
            for g_idx, (pred, goal) in enumerate(dists):
                mu, sigma, rho = pred.numpy()
                mean = (origin[:, None] + np.cumsum(mu + goal[:, None], axis=1)) / scale
                for a, agent in enumerate(window.agent_ids):
                    for t in range(mu.shape[1]):
                        writer.writerow(("gaussian", w_idx, agent, g_idx, "", t, _fmt(float(mean[a, t, 0])),
                                         _fmt(float(mean[a, t, 1])), _fmt(float(sigma[a, t, 0] / scale)),
                                         _fmt(float(sigma[a, t, 1] / scale)), _fmt(float(rho[a, t]))))
            rng = np.random.default_rng([seed, w_idx])
            samples = window_samples(dists, window.observed * scale, n_samples, rng) / scale
            for s in range(n_samples):
                for a, agent in enumerate(window.agent_ids):
                    for t in range(samples.shape[2]):
                        writer.writerow(("sample", w_idx, agent, s % len(dists), s, t, _fmt(float(samples[s, a, t, 0])),
                                         _fmt(float(samples[s, a, t, 1])), "", "", ""))
    return Path(path)


def cmd_predict(args):
    torch.set_num_threads(1)
    run_dir, bundle, info = _open_run(args.run)
    _require_predictor(bundle)
    (windows, _), cache = _eval_split(args, info)
    seed = bundle.cfg.seed if args.seed is None else args.seed
    out_dir = run_dir / "predict"
    out_dir.mkdir(exist_ok=True)
    path = Path(args.out) if args.out else out_dir / "predictions.csv"
    write_predictions(path, bundle, windows, args.samples, seed)
    RunManifest("predict", None, bundle.cfg.digest(), seed, str(out_dir), _now(),
                extra={"data": str(cache), "file": str(path)}).write(out_dir)
    print(f"predictions,{path}")
    return 0


# ---------------------------------------------------------------- plot


def cmd_plot(args):
    from . import plotting

    torch.set_num_threads(1)
    if not Path(args.run).exists() and not (runs_root() / args.run).exists():
        raise UsageError(f"run directory not found: {args.run}")
    run_dir, bundle, info = _open_run(args.run)
    (windows, _), cache = _eval_split(args, info)
    if not windows:
        raise UsageError("no windows to plot")
    out = Path(args.out) if args.out else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    seed = bundle.cfg.seed if args.seed is None else args.seed
    written = []

    labels = bundle.hard_labels(windows)
    latents = bundle.latents(windows)
    written.append(plotting.plot_latents(out / "latents.png", latents, labels, title="latent embedding"))

    if bundle.predictor is not None:
        from .evaluation import window_samples

        idx = min(max(args.window, 0), len(windows) - 1)
        window = windows[idx]
        scale = bundle.cfg.scale
        rng = np.random.default_rng([seed, idx])
        samples = window_samples(bundle.distributions(window), window.observed * scale, args.samples, rng) / scale
        offsets = np.concatenate([[0], np.cumsum([w.n_agents for w in windows])])
        win_labels = labels[offsets[idx]:offsets[idx + 1]]
        written.append(plotting.plot_trajectories(out / "trajectories.png", window.observed, window.future, samples,
                                                  win_labels, title=f"window {idx}"))
    RunManifest("plot", None, bundle.cfg.digest(), seed, str(out), _now(),
                extra={"data": str(cache), "files": [str(p) for p in written]}).write(out)
    for p in written:
        print(f"figure,{p}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="bpsgcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="cut windows and write the cache")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", help="generate a synthetic three-mode dataset")
    src.add_argument("--data", help="directory of ETH/UCY or SDD annotation files")
    p.add_argument("--format", choices=("ethucy", "sdd"), default="ethucy")
    p.add_argument("--test-scene", help="substring naming the held-out scene")
    p.add_argument("--val-scene", help="substring naming the validation scene")
    p.add_argument("--agents", type=int, default=100, help="synthetic training agents per mode")
    p.add_argument("--val-agents", type=int, default=20)
    p.add_argument("--test-agents", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-obs", type=int, default=8)
    p.add_argument("--t-fut", type=int, default=12)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", help="cache directory (default $BPSGCN_RUNS/data)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--data", required=True, help="window cache file or directory")
    p.add_argument("--config", help="flat JSON config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    p.add_argument("--stages", default="abc", help="subset of 'abc' to run")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="model archive to continue from")
    p.add_argument("--run", help="run name or directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "best-of-N ADE/FDE and cluster report"),
                                  ("predict", cmd_predict, "dump sampled tracks and Gaussians"),
                                  ("plot", cmd_plot, "trajectory overlay and latent scatter")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run", required=True, help="run directory or name")
        p.add_argument("--data", help="window cache (default: the one used for training)")
        p.add_argument("--split", choices=SPLITS, default="test")
        p.add_argument("--samples", type=int, default=20)
        p.add_argument("--seed", type=int)
        if name == "eval":
            p.add_argument("--repeats", type=int, default=1, help="evaluation reruns with seeds seed..seed+R-1")
        if name == "predict":
            p.add_argument("--out", help="output file")
        if name == "plot":
            p.add_argument("--window", type=int, default=0)
            p.add_argument("--out", help="figure directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "samples", 1) < 1 or getattr(args, "repeats", 1) < 1:
        print("error: --samples and --repeats must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataFormatError, EmptySceneError, checkpoint.ArchiveError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError, EmptyTestSetError, EmptyRepositoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
