"""``mimo-seer`` command line: gen-data, train, eval, compare, ar-demo, attn.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, baselines, metrics
from .config import RunConfig, apply_override
from .data import (DataFormatError, Dataset, SpriteWorldConfig, generate_sprites, read_idx, read_vseq, split,
                   write_vseq)
from .model import ATTENTION_KINDS, ConfigError, ModelConfig, Parameters, extract_attention, model_forward, sum_heads
from .numerics import NonFiniteError, no_grad
from .training import (Checkpoint, CheckpointError, NumericalAbort, load_checkpoint, save_checkpoint, train)

log = logging.getLogger("mimo_seer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- shared helpers -------------------------------------------------------

def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from exc
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from exc
    for assignment in getattr(args, "set", None) or []:
        apply_override(doc, assignment)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out_dir"] = args.out
    return RunConfig.from_dict(doc)


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _load_dataset(run: RunConfig, path: Optional[str]) -> Dataset:
    path = path or run.data.path
    if path:
        return read_vseq(path)
    bank = read_idx(run.data.idx_images) if run.data.idx_images else None
    return generate_sprites(run.data.generator, bank)


def _eval_split(run: RunConfig, ds: Dataset) -> Dataset:
    # the held-out split depends on the data, not on the training seed
    _, ev = split(ds, run.data.train_frac, run.data.generator.seed)
    if len(ev) > run.eval.max_sequences:
        ev = Dataset(ev.sequences[:run.eval.max_sequences], ev.split, ev.provenance)
    return ev


def _check_compatible(cfg: ModelConfig, ds: Dataset, frames_needed: int) -> None:
    if tuple(ds.frame_shape) != (cfg.C0, cfg.H0, cfg.W0):
        raise DataError(f"data frames {tuple(ds.frame_shape)} do not match the model's "
                        f"{(cfg.C0, cfg.H0, cfg.W0)}")
    if ds.seq_len < frames_needed:
        raise DataError(f"sequences have {ds.seq_len} frames; this run needs {frames_needed}")


def predict(params: Parameters, cfg: ModelConfig, inputs: np.ndarray, horizon: int, batch_size: int = 64) -> np.ndarray:
    """Forecast ``horizon`` frames for each input clip, block-recursively past the native length."""
    chunks = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            x = inputs[start:start + batch_size]
            if horizon <= cfg.out_len:
                chunks.append(model_forward(x, params, cfg).prediction.data[:, :horizon])
            else:
                chunks.append(baselines.miso_rollout(params, cfg, x, horizon, mode="block"))
    return np.concatenate(chunks, axis=0)


def evaluate_checkpoint(params: Parameters, cfg: ModelConfig, ev: Dataset, run: RunConfig, horizon: int,
                        thresholds: Sequence[float], config_hash: str, step: int) -> metrics.MetricsReport:
    _check_compatible(cfg, ev, cfg.m + horizon)
    seqs = ev.sequences
    pred = predict(params, cfg, seqs[:, :cfg.m], horizon, run.eval.batch_size)
    truth = seqs[:, cfg.m:cfg.m + horizon]
    report = metrics.evaluate(pred, truth, thresholds, config_hash)
    baseline = metrics.mse(baselines.copy_last(seqs[:, :cfg.m], horizon), truth, "pixel_mean")
    report.extra = {
        "horizon": horizon,
        "native_horizon": cfg.out_len,
        "recursive": horizon > cfg.out_len,
        "rollout": "block" if horizon > cfg.out_len else "none",
        "checkpoint_step": step,
        "copy_last_mse_pixel": baseline,
    }
    return report


def _write_text(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _csv_text(header: Sequence[str], rows, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _checkpoint_run(ckpt: Checkpoint, args) -> RunConfig:
    """Run config stored in a checkpoint, with command-line overrides on top."""
    doc = dict(ckpt.extra.get("run_config", {}))
    doc["model"] = ckpt.config.to_dict()
    base = RunConfig.from_dict(doc)
    if args.config or getattr(args, "set", None):
        override = _load_config(args)
        base = replace(base, data=override.data, eval=override.eval, out_dir=override.out_dir)
    if args.out is not None:
        base = replace(base, out_dir=args.out)
    return base


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# -- commands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = _load_config(args)
    g = run.data.generator.to_dict()
    for flag, key in (("sprites", "num_sprites"), ("frames", "seq_len"), ("count", "num_sequences"),
                      ("kind", "kind"), ("sprite_size", "sprite_size")):
        value = getattr(args, flag)
        if value is not None:
            g[key] = value
    if args.size is not None:
        g["height"] = g["width"] = args.size
    if args.seed is not None:
        g["seed"] = args.seed
    bank = None
    if args.idx_images:
        loaded = read_idx(args.idx_images, args.idx_labels)
        bank = loaded[0] if isinstance(loaded, tuple) else loaded
        if args.kind is None:
            g["kind"] = "digit_from_idx"
    try:
        gcfg = SpriteWorldConfig.from_dict(g)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_sprites(gcfg, bank)
    out = _out_dir(run)
    target = out / args.file
    try:
        write_vseq(ds, target)
    except OSError as exc:
        raise DataError(f"cannot write {target}: {exc.strerror}") from exc
    sidecar = {
        "config_hash": gcfg.digest(),
        "generator": gcfg.to_dict(),
        "shape": list(ds.sequences.shape),
        "idx_images": args.idx_images,
        "file_sha256": read_vseq(target).provenance["sha256"],
        "version": __version__,
    }
    _write_text(target.with_suffix(".json"), json.dumps(sidecar, indent=2) + "\n")
    _say(args, f"wrote {target} ({len(ds)} sequences x {ds.seq_len} frames)")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_config(args)
    if args.steps is not None:
        run = replace(run, train=replace(run.train, steps=args.steps))
    if args.data:
        run = replace(run, data=replace(run.data, path=args.data))
    cfg = run.model
    hyper = run.hyper
    ds = _load_dataset(run, args.data)
    _check_compatible(cfg, ds, cfg.m + cfg.out_len)
    tr, _ = split(ds, run.data.train_frac, run.data.generator.seed)
    ev = _eval_split(run, ds)
    config_hash = run.config_hash()
    out = _out_dir(run)

    state = None
    if args.resume:
        ckpt = _load_ckpt(args.resume)
        if ckpt.config != cfg:
            raise UsageError(f"checkpoint {args.resume} was trained with a different model config")
        state = ckpt.to_result()

    def save(result, name):
        extra = {"run_config": run.to_dict(), "config_hash": config_hash}
        save_checkpoint(out / name, Checkpoint.from_result(cfg, result, extra))

    every = args.checkpoint_every
    target = hyper.steps
    done = state.step if state is not None else 0
    while True:
        stop = min(target, done + every) if every else target
        state = train(cfg, tr, replace(hyper, steps=stop), resume=state)
        done = state.step
        if every and done < target:
            save(state, f"checkpoint_step{done}.mvpc")
        if done >= target:
            break
    save(state, "checkpoint.mvpc")

    rows = [(step, _fmt(lv), _fmt(lr)) for step, lv, lr in state.history]
    _write_text(out / "loss.csv", _csv_text(("step", "loss", "lr"), rows, config_hash))
    report = evaluate_checkpoint(state.params, cfg, ev, run, cfg.out_len, run.eval.csi_thresholds,
                                 config_hash, state.step)
    _write_text(out / "metrics.json", report.to_json())
    _write_text(out / "run_config.json", run.to_json())
    if args.plot:
        from .plotting import plot_loss

        plot_loss(state.history, out / "loss.png", f"config {config_hash}")
    _say(args, f"trained {state.step} steps; eval mse_pixel {report.aggregates['mse_pixel']:.6g} "
               f"(copy_last {report.extra['copy_last_mse_pixel']:.6g}); outputs in {out}")
    return EXIT_OK


def _parse_thresholds(text: Optional[str], default) -> List[float]:
    if text is None:
        return list(default)
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --csi-thresholds {text!r}") from exc


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    run = _checkpoint_run(ckpt, args)
    cfg = ckpt.config
    horizon = args.horizon if args.horizon is not None else cfg.out_len
    if horizon < 1:
        raise UsageError("--horizon must be >= 1")
    ds = _load_dataset(run, args.data)
    ev = _eval_split(run, ds) if args.split == "eval" else ds
    config_hash = ckpt.extra.get("config_hash", run.config_hash())
    thresholds = _parse_thresholds(args.csi_thresholds, run.eval.csi_thresholds)
    report = evaluate_checkpoint(ckpt.params, cfg, ev, run, horizon, thresholds, config_hash, ckpt.step)
    out = _out_dir(run)
    path = out / (args.report or "metrics.json")
    _write_text(path, report.to_json())
    ssim_value = report.aggregates["ssim"]
    ssim_text = "n/a" if ssim_value is None else f"{ssim_value:.4f}"
    _say(args, f"wrote {path}: mse {report.aggregates['mse']:.6g} ssim {ssim_text}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    run = _checkpoint_run(ckpt, args)
    cfg = ckpt.config
    horizon = args.horizon if args.horizon is not None else 4 * cfg.n
    if horizon < 1:
        raise UsageError("--horizon must be >= 1")
    ev = _eval_split(run, _load_dataset(run, args.data)) if args.split == "eval" else _load_dataset(run, args.data)
    _check_compatible(cfg, ev, cfg.m + horizon)
    seqs = ev.sequences
    inputs, truth = seqs[:, :cfg.m], seqs[:, cfg.m:cfg.m + horizon]
    config_hash = ckpt.extra.get("config_hash", run.config_hash())
    preds = {
        "mimo": predict(ckpt.params, cfg, inputs, horizon, run.eval.batch_size),
        "miso": np.concatenate([baselines.miso_rollout(ckpt.params, cfg, inputs[i:i + run.eval.batch_size],
                                                        horizon, mode="single")
                                for i in range(0, len(inputs), run.eval.batch_size)], axis=0),
        "copy_last": baselines.copy_last(inputs, horizon),
    }
    curves = {name: baselines.framewise_error_curve(p, truth, args.metric, name) for name, p in preds.items()}
    out = _out_dir(run)
    rows = [(name, k + 1, _fmt(v)) for name, c in curves.items() for k, v in enumerate(c.values)]
    _write_text(out / "curves.csv", _csv_text(("strategy", "step", "value"), rows, config_hash))
    wide = [f"# config_hash: {config_hash}", f"# metric: {args.metric}", "# step " + " ".join(curves)]
    for k in range(horizon):
        wide.append(" ".join([str(k + 1)] + [_fmt(c.values[k]) for c in curves.values()]))
    _write_text(out / "curves.dat", "\n".join(wide) + "\n")
    if args.sweep_m:
        truth_n = seqs[:, cfg.m:cfg.m + cfg.out_len]
        sweep = []
        for m_in in range(1, cfg.m + 1):
            p = predict(ckpt.params, cfg, seqs[:, cfg.m - m_in:cfg.m], cfg.out_len, run.eval.batch_size)
            sweep.append((m_in, _fmt(metrics.mse(p, truth_n)), _fmt(metrics.mse(p, truth_n, "pixel_mean"))))
        _write_text(out / "sweep_m.csv", _csv_text(("m", "mse", "mse_pixel"), sweep, config_hash))
    if args.plot:
        from .plotting import plot_curves

        plot_curves({n: c.values for n, c in curves.items()}, out / "curves.png", args.metric)
    _say(args, f"wrote {out / 'curves.csv'}")
    return EXIT_OK


def cmd_ar_demo(args) -> int:
    run = _load_config(args)
    if args.steps < 1 or args.trials < 1 or args.sigma < 0:
        raise UsageError("--steps and --trials must be >= 1 and --sigma >= 0")
    res = baselines.ar1_rollout(baselines.Ar1Params(args.A, args.sigma, args.steps, args.trials, run.seed))
    rows = []
    for k in range(1, args.steps + 1):
        emp = float(res.variance[k - 1])
        closed = baselines.ar1_variance_closed_form(args.A, args.sigma, k)
        rel = abs(emp - closed) / closed if closed > 0 else abs(emp)
        rows.append((k, _fmt(emp), _fmt(closed), _fmt(rel)))
    out = _out_dir(run)
    doc = {"A": args.A, "sigma": args.sigma, "steps": args.steps, "trials": args.trials, "seed": run.seed}
    digest = run.config_hash() + "-" + "-".join(f"{k}={v}" for k, v in doc.items())
    _write_text(out / "ar_demo.csv", _csv_text(("step", "empirical", "closed_form", "rel_error"), rows, digest))
    if args.plot:
        from .plotting import plot_curves

        plot_curves({"empirical": [float(r[1]) for r in rows], "closed form": [float(r[2]) for r in rows]},
                    out / "ar_demo.png", "residual variance")
    _say(args, f"wrote {out / 'ar_demo.csv'}; max rel_error {max(float(r[3]) for r in rows):.4g}")
    return EXIT_OK


def _layer_count(cfg: ModelConfig, kind: str) -> int:
    if kind == "encoder_self":
        return cfg.enc_blocks if cfg.use_2dmha else 0
    if kind == "decoder_self":
        return cfg.dec_blocks if (cfg.use_2dmha and cfg.use_decoder_self_attn) else 0
    return cfg.dec_blocks if cfg.use_2dmha else 0


def cmd_attn(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    run = _checkpoint_run(ckpt, args)
    cfg = ckpt.config
    kinds = [args.kind] if args.kind else list(ATTENTION_KINDS)
    for kind in kinds:
        if args.layer is not None and not 0 <= args.layer < _layer_count(cfg, kind):
            raise UsageError(f"layer {args.layer} out of range for {kind} "
                             f"(model has {_layer_count(cfg, kind)} such layers)")
    ds = _load_dataset(run, args.data)
    probe = _eval_split(run, ds) if args.split == "eval" else ds
    if not 0 <= args.index < len(probe):
        raise UsageError(f"--index {args.index} out of range for {len(probe)} sequences")
    _check_compatible(cfg, probe, cfg.m)
    with no_grad():
        result = model_forward(probe.sequences[args.index:args.index + 1, :cfg.m], ckpt.params, cfg, record=True)
    records = []
    for kind in kinds:
        if _layer_count(cfg, kind):
            records += extract_attention(result.attention, kind, args.layer)
    if not records:
        raise UsageError("the model records no attention for the requested kind/layer")
    if args.sum_heads:
        records = sum_heads(records)
    rows = []
    for r in records:
        head = "sum" if r.head < 0 else r.head
        for i in range(r.map.shape[0]):
            for j in range(r.map.shape[1]):
                rows.append((r.kind, r.layer, head, i, j, _fmt(r.map[i, j])))
    out = _out_dir(run)
    config_hash = ckpt.extra.get("config_hash", run.config_hash())
    _write_text(out / "attention.csv",
                _csv_text(("kind", "layer", "head", "query", "key", "weight"), rows, config_hash))
    if args.plot:
        from .plotting import plot_attention

        maps = {f"{r.kind} L{r.layer} h{'sum' if r.head < 0 else r.head}": r.map for r in records}
        plot_attention(maps, out / "attention.png")
    _say(args, f"wrote {out / 'attention.csv'} ({len(records)} maps)")
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config (empty means toy defaults)")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
    common.add_argument("--plot", action="store_true", default=argparse.SUPPRESS,
                        help="also render PNG figures (needs matplotlib)")

    parser = argparse.ArgumentParser(prog="mimo-seer", parents=[common],
                                     description="Parallel multi-frame video prediction on numpy.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a moving-sprite VSEQ dataset")
    g.add_argument("--sprites", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--kind")
    g.add_argument("--sprite-size", type=int)
    g.add_argument("--idx-images")
    g.add_argument("--idx-labels")
    g.add_argument("--file", default="data.vseq", help="file name inside the output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="VSEQ file (default: generate from the config)")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    def with_ckpt(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--split", choices=("eval", "all"), default="eval")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    with_ckpt(e)
    e.add_argument("--horizon", type=int)
    e.add_argument("--csi-thresholds")
    e.add_argument("--report", help="report file name inside the output directory")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", parents=[common], help="frame-wise error curves of mimo, miso and copy_last")
    with_ckpt(c)
    c.add_argument("--horizon", type=int)
    c.add_argument("--metric", default="mse", choices=("mse", "mae", "mse_pixel", "mae_pixel", "ssim", "psnr"))
    c.add_argument("--sweep-m", action="store_true")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("ar-demo", parents=[common], help="AR(1) error accumulation table")
    a.add_argument("--A", type=float, default=0.9)
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--trials", type=int, default=100_000)
    a.set_defaults(func=cmd_ar_demo)

    at = sub.add_parser("attn", parents=[common], help="dump attention maps")
    with_ckpt(at)
    at.add_argument("--kind", choices=ATTENTION_KINDS)
    at.add_argument("--layer", type=int)
    at.add_argument("--index", type=int, default=0, help="probe sequence")
    at.add_argument("--sum-heads", action="store_true")
    at.set_defaults(func=cmd_attn)
    return parser


def _thread_cap() -> int:
    raw = os.environ.get("MIMO_SEER_THREADS", "")
    try:
        n = int(raw) if raw else 0
    except ValueError:
        n = 0
    return max(n, 1) if raw else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("quiet", False), ("set", None),
                          ("plot", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    cap = _thread_cap()
    try:
        if cap:
            with threadpool_limits(limits=cap):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mimo-seer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DataFormatError, CheckpointError, OSError) as exc:
        print(f"mimo-seer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, NonFiniteError, FloatingPointError) as exc:
        print(f"mimo-seer: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"mimo-seer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
