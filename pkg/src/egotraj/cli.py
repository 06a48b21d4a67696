"""Command-line entry point.

Subcommands: synth (generate a JSONL dataset), train, eval, predict,
gradcheck (finite-difference verification of the full model), bench (scan
throughput). Exit codes: 0 success, 1 contract violation, 2 usage error.

Config files are plain `key = value` lines with `#` comments; keys mirror
the TrainConfig / ModelConfig field names (model fields may be given at the
top level). Every run prints its resolved configuration.

The report paths (train/eval/bench) write delimited output and can render a
matplotlib figure next to it via --plot.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data, metrics, ssm
from .autodiff import grad_check, smooth_l1
from .model import (ModelConfig, forward_offsets, init_params, named_tensors,
                    predict)
from .representation import cvcs_reference, cvcs_statistics
from .train import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                    target_offsets, train_loop)

GRADCHECK_TOL = 1e-4

MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)
                if f.name != "model"}


def parse_config_file(path) -> dict:
    """`key = value` lines, '#' comments; values typed per the config fields."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in MODEL_FIELDS and key not in TRAIN_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key '{key}'")
            values[key] = val
    return values


def _coerce(val: str, typename) -> object:
    name = typename if isinstance(typename, str) else getattr(typename, "__name__", "str")
    if name == "int":
        return int(val)
    if name == "float":
        return float(val)
    return val


def build_train_config(file_values: dict, overrides: dict) -> TrainConfig:
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    model_kwargs = {k: _coerce(v, MODEL_FIELDS[k]) if isinstance(v, str) else v
                    for k, v in merged.items() if k in MODEL_FIELDS}
    train_kwargs = {k: _coerce(v, TRAIN_FIELDS[k]) if isinstance(v, str) else v
                    for k, v in merged.items() if k in TRAIN_FIELDS}
    return TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)


def print_config(cfg) -> None:
    print("resolved config:")
    for line in json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True).splitlines():
        print("  " + line)


def _data_file(path: Path) -> Path:
    return path if path.is_file() else path / "tracks.jsonl"


def _load_split(path: Path, cfg: TrainConfig):
    tracks = data.load_tracks(_data_file(path))
    return data.split(tracks, seed=cfg.seed)


def _plot_training_log(log_path: Path, plot_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [line.split(",") for line in
            log_path.read_text(encoding="utf-8").splitlines()[1:] if line]
    steps = [int(r[0]) for r in rows]
    loss = [float(r[1]) for r in rows]
    eval_pts = [(int(r[0]), float(r[2])) for r in rows if r[2]]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, loss, label="train loss", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("smooth-L1 loss")
    ax.set_yscale("log")
    if eval_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*eval_pts), "o-", color="tab:orange", ms=3, label="val ADE")
        ax2.set_ylabel("val ADE [px]")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)


def _plot_displacement_profile(pred, gt, plot_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    diff = pred[..., :2] - gt[..., :2]
    per_step = np.sqrt((diff * diff).sum(axis=-1)).mean(axis=0)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(per_step) + 1), per_step, lw=1.5)
    ax.set_xlabel("future step")
    ax.set_ylabel("mean center displacement [px]")
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"resolved config: tracks={args.tracks} len={args.len} seed={args.seed} "
          f"ego_gain={args.ego_gain} noise={args.noise} ego_kind={args.ego_kind}")
    tracks = data.synth_generate(args.tracks, args.len, seed=args.seed,
                                 ego_gain=args.ego_gain, noise=args.noise)
    if args.ego_kind == "behavior":
        tracks = data.to_behavior_tracks(tracks)
    data.save_tracks(out / "tracks.jsonl", tracks)
    print(f"wrote {len(tracks)} tracks to {out / 'tracks.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = build_train_config(
        parse_config_file(args.config) if args.config else {},
        {"seed": args.seed})
    print_config(cfg)
    train_tracks, val_tracks, _ = _load_split(Path(args.data), cfg)
    m, n = cfg.model.m_obs, cfg.model.n_pred
    train_samples = data.window_samples(train_tracks, m, n, args.stride)
    val_samples = data.window_samples(val_tracks, m, n, args.stride)
    log_path = Path(args.out).with_suffix(".log.csv")
    ckpt = train_loop(train_samples, val_samples, cfg, log_path=log_path)
    save_checkpoint(args.out, ckpt)
    print(f"best val ADE {ckpt.best_val_ade:.6g} at step {ckpt.step}; "
          f"checkpoint -> {args.out}, log -> {log_path}")
    if args.plot:
        _plot_training_log(log_path, Path(args.plot))
        print(f"training curve -> {args.plot}")
    return 0


def cmd_eval(args) -> int:
    if args.baseline is None and args.ckpt is None:
        raise ValueError("eval needs --ckpt unless --baseline is given")
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        cfg = ckpt.config
        params = ckpt.build_params()
    else:
        cfg = build_train_config(
            parse_config_file(args.config) if args.config else {}, {})
        params = None
    print_config(cfg)
    _, _, test_tracks = _load_split(Path(args.data), cfg)
    samples = data.window_samples(test_tracks, cfg.model.m_obs, cfg.model.n_pred,
                                  args.stride)
    report = evaluate(samples, params, cfg.model, baseline=args.baseline,
                      ablate_ego_zero=args.ablate_ego_zero)
    label = args.baseline or ("model+ego0" if args.ablate_ego_zero else "model")
    metrics.write_metrics_csv(args.out, [(label, report)])
    print(metrics.format_metrics_csv([(label, report)]).strip())
    if args.plot:
        from .train import stack_samples
        obs, ego, fut = stack_samples(samples)
        if args.baseline == "cvcs":
            pred = cvcs_reference(obs[..., -1, :], cvcs_statistics(obs), fut.shape[-2])
        else:
            if args.ablate_ego_zero:
                ego = np.zeros_like(ego)
            pred = predict(obs, ego, params, cfg.model)
        _plot_displacement_profile(pred, fut, Path(args.plot))
        print(f"displacement profile -> {args.plot}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    params = ckpt.build_params()
    print_config(cfg)
    tracks = data.load_tracks(args.track)
    m, n = cfg.model.m_obs, cfg.model.n_pred
    rows = []
    for t in tracks:
        ends = np.where(t.frames == args.frame)[0] if args.frame is not None else []
        if args.frame is not None:
            if len(ends) == 0 or ends[0] < m - 1:
                continue
            starts = [int(ends[0]) - m + 1]
        else:
            starts = range(0, len(t) - m + 1)
        for start in starts:
            obs = t.boxes[start:start + m]
            pred = predict(obs, t.ego[start:start + m], params, cfg.model)
            row = {"track_id": t.track_id, "start_frame": int(t.frames[start]),
                   "pred_boxes": pred.tolist()}
            if start + m + n <= len(t):
                row["gt_boxes"] = t.boxes[start + m:start + m + n].tolist()
            rows.append(row)
    if not rows:
        raise ValueError("no prediction window fits the requested frame")
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    print(f"wrote {len(rows)} prediction windows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    file_values.setdefault("d_model", "8")
    file_values.setdefault("m_obs", "6")
    file_values.setdefault("n_pred", "4")
    # normalized inputs keep the finite-difference oracle well conditioned
    file_values.setdefault("img_w", "1920")
    file_values.setdefault("img_h", "1080")
    cfg = build_train_config(file_values, {})
    print_config(cfg)

    rng = np.random.default_rng(cfg.seed)
    m, n = cfg.model.m_obs, cfg.model.n_pred
    track = data.synth_generate(1, m + n, seed=cfg.seed, ego_gain=0.5, noise=1.0)[0]
    ego = track.ego[:m]
    if cfg.model.ego_kind == "behavior":
        ego = data.speed_to_behavior(track.ego)[:m]
    obs, fut = track.boxes[:m], track.boxes[m:m + n]
    targets = target_offsets(obs, fut) + rng.normal(0, 0.1, size=(n, 4))

    params = init_params(cfg.model, zero_init_head=False)

    def loss():
        return smooth_l1(forward_offsets(obs, ego, params, cfg.model),
                         targets, beta=cfg.beta)

    err = grad_check(loss, named_tensors(params), eps=args.eps)
    print(f"max relative gradient error: {err:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if err < GRADCHECK_TOL else 1


def cmd_bench(args) -> int:
    print(f"resolved config: len={args.len} d_model={args.d_model} "
          f"iters={args.iters} dtype={args.dtype}")
    dtype = np.dtype(args.dtype)
    d_inner, d_state = 2 * args.d_model, 16
    rng = np.random.default_rng(0)
    dt = rng.uniform(0.01, 0.1, (args.len, d_inner)).astype(dtype)
    b = rng.standard_normal((args.len, d_state)).astype(dtype)
    c = rng.standard_normal((args.len, d_state)).astype(dtype)
    u = rng.standard_normal((args.len, d_inner)).astype(dtype)
    a = -rng.uniform(0.5, 2.0, (d_inner, d_state)).astype(dtype)
    d = np.ones(d_inner, dtype=dtype)

    ssm.scan_kernel(dt, b, c, u, a, d)  # warm up
    t0 = time.perf_counter()
    for _ in range(args.iters):
        ssm.scan_kernel(dt, b, c, u, a, d)
    elapsed = time.perf_counter() - t0
    steps_per_sec = args.len * args.iters / elapsed
    lines = ["len,d_model,iters,seconds,steps_per_sec",
             f"{args.len},{args.d_model},{args.iters},{elapsed:.6g},{steps_per_sec:.6g}"]
    out = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(out, encoding="utf-8")
    print(out.strip())
    return 0


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egotraj",
        description="Egocentric pedestrian trajectory prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tracks", type=int, default=100)
    p.add_argument("--len", type=int, default=90)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ego-gain", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--ego-kind", choices=data.EGO_KINDS, default="speed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset dir or tracks.jsonl")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--plot", help="render the training curve to this PNG")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the CV-CS baseline")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="config file (baseline mode only)")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--baseline", choices=["cvcs"])
    p.add_argument("--ablate-ego-zero", action="store_true",
                   help="zero the ego signal before prediction")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--plot", help="render the per-step displacement profile PNG")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="export predicted future boxes as JSONL")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--track", required=True, help="JSONL track file")
    p.add_argument("--frame", type=int, help="last observed frame number")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", help="config file (tiny model by default)")
    p.add_argument("--eps", type=float, default=2e-4,
                   help="finite-difference step (roundoff/truncation tradeoff)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="selective-scan throughput")
    p.add_argument("--len", type=int, default=2048)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--out", help="write the CSV here as well")
    p.set_defaults(fn=cmd_bench)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
