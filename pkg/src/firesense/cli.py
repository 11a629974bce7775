"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or
malformed data files, 3 numerical failure. Every subcommand that writes
into an output directory also drops an effective_config.txt there; for
`train` and `count` that file is itself a loadable config, so a run is
reproducible from its own echo.

Config files use one `key=value` per line (# comments and blank lines
allowed). Keys mirror the model and training config fields; unknown keys
are rejected, and each key also has a command-line flag that overrides
the file value.
"""

import argparse
import dataclasses
import os
import sys
import typing

import numpy as np

from . import tensor as T
from .analysis import (IMPORTANCE_CSV_HEADER, channel_importance, export_attention,
                       mc_predict)
from .data import (Dataset, compute_norm_stats, generate_synthetic, load_dataset,
                   preprocess_x, normalize, save_dataset, save_norm_stats,
                   save_raster, split)
from .errors import (ConfigurationError, FireSenseError, FormatError,
                     NumericalError, ShapeMismatchError,
                     UnsupportedArchitectureError)
from .metrics import (AUDIT_CSV_HEADER, REPORT_CSV_HEADER, SWEEP_CSV_HEADER,
                      audit_csv_row, evaluate, inflation_audit)
from .models import ARCHS, ModelConfig, build, count_flops, count_params
from .rng import rng_for
from .tensor import Tensor, gradient_check
from .train import (TrainConfig, fit, init_state, load_checkpoint, predict_probs,
                    save_checkpoint, save_history)

DUMMY_PREDICTOR = "dummy-copy-prev"

_MODEL_KEYS = {f.name: t for f, t in
               zip(dataclasses.fields(ModelConfig),
                   typing.get_type_hints(ModelConfig).values())}
_TRAIN_KEYS = {f.name: t for f, t in
               zip(dataclasses.fields(TrainConfig),
                   typing.get_type_hints(TrainConfig).values())}
CONFIG_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep codes ours
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing

def _parse_value(key: str, raw: str):
    typ = CONFIG_KEYS[key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{key} expects true/false, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as e:
        raise ConfigurationError(f"bad value for {key}: {raw!r} ({e})") from e


def read_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    return values


def _add_config_flags(parser, keys) -> None:
    for key in keys:
        parser.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key,
                            default=None, metavar="V")


def _resolve_configs(args, file_path) -> tuple[ModelConfig, TrainConfig, bool]:
    """Defaults < config file < flags. Returns (model, train, any_override)."""
    values = read_config_file(file_path) if file_path else {}
    overridden = bool(values)
    for key in CONFIG_KEYS:
        raw = getattr(args, "cfg_" + key, None)
        if raw is not None:
            values[key] = _parse_value(key, raw)
            overridden = True
    model_config = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
    train_config = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    model_config.validate()
    train_config.validate()
    return model_config, train_config, overridden


def _echo_config(out_dir, command: str, run_args: dict,
                 model_config=None, train_config=None) -> None:
    lines = [f"# firesense {command}"]
    for k, v in run_args.items():
        lines.append(f"# {k}={v}")
    merged = {}
    if model_config is not None:
        merged.update(dataclasses.asdict(model_config))
    if train_config is not None:
        merged.update(dataclasses.asdict(train_config))
    for k in sorted(merged):
        lines.append(f"{k}={merged[k]}")
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _out_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


# ---------------------------------------------------------------------------
# shared data plumbing

def _pick_split(dataset: Dataset, which: str, seed: int) -> Dataset:
    if which == "all":
        return dataset
    train_ds, val_ds, test_ds = split(dataset, seed)
    return {"train": train_ds, "val": val_ds, "test": test_ds}[which]


def _load_predictor(ckpt_path):
    """Returns (state_or_None, model_name). None state = copy-prev dummy."""
    if ckpt_path == DUMMY_PREDICTOR:
        return None, DUMMY_PREDICTOR
    state = load_checkpoint(ckpt_path)
    return state, state.model_config.arch


def _probs_for(state, samples) -> np.ndarray:
    if state is None:
        return np.stack([np.clip(s.x[3].astype(np.float64), 0.0, 1.0) for s in samples])
    cfg = state.config
    return predict_probs(state.model, samples, state.stats, cfg.sigma_prev, cfg.sigma_wind)


def _eval_arrays(samples):
    prevs = np.stack([s.x[3] for s in samples])
    ys = np.stack([s.y for s in samples])
    return prevs, ys


def _find_sample(dataset: Dataset, sample_id):
    if sample_id is None:
        return dataset.samples[0]
    for s in dataset.samples:
        if s.id == sample_id:
            return s
    raise ConfigurationError(f"sample id {sample_id} not present in the dataset")


def _resolved_split_seed(state) -> int:
    cfg = state.config
    return cfg.seed if cfg.split_seed < 0 else cfg.split_seed


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    out = _out_dir(args.out)
    ds = generate_synthetic(args.n, args.seed, spread_bias=args.spread_bias,
                            size=args.size)
    path = os.path.join(out, "data.fsnw")
    save_dataset(ds, path)
    _echo_config(out, "gen-data", {"n": args.n, "seed": args.seed,
                                   "spread_bias": args.spread_bias,
                                   "size": args.size, "path": path})
    print(f"wrote {len(ds.samples)} samples to {path}")
    return 0


def _cmd_stats(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    subset = _pick_split(ds, args.split, args.split_seed)
    stats = compute_norm_stats([
        preprocess_x(s.x, args.sigma_prev, args.sigma_wind) for s in subset.samples
    ])
    path = os.path.join(out, "norm_stats.csv")
    save_norm_stats(stats, path)
    _echo_config(out, "stats", {"data": args.data, "split": args.split,
                                "split_seed": args.split_seed,
                                "sigma_prev": args.sigma_prev,
                                "sigma_wind": args.sigma_wind})
    print(f"wrote per-channel stats over {len(subset.samples)} samples to {path}")
    return 0


def _cmd_train(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    if args.resume:
        model_config, train_config, overridden = _resolve_configs(args, args.config)
        if overridden:
            raise ConfigurationError(
                "--resume continues from the checkpoint's embedded config; "
                "drop the config file/flag overrides")
        state = load_checkpoint(args.resume)
        model_config, train_config = state.model_config, state.config
    else:
        model_config, train_config, _ = _resolve_configs(args, args.config)
    split_seed = (train_config.seed if train_config.split_seed < 0
                  else train_config.split_seed)
    train_ds, val_ds, _ = split(ds, split_seed)
    if not args.resume:
        state = init_state(model_config, train_config, train_ds.samples)
    ckpt_path = os.path.join(out, "checkpoint.fsck")
    model, history = fit(state, train_ds, val_ds, checkpoint_path=ckpt_path,
                         checkpoint_every=args.checkpoint_every,
                         until_epoch=args.until_epoch)
    save_checkpoint(os.path.join(out, "model.fsck"), state)
    save_history(history, os.path.join(out, "history.csv"))
    save_norm_stats(state.stats, os.path.join(out, "norm_stats.csv"))
    _echo_config(out, "train",
                 {"data": args.data, "resume": args.resume or "",
                  "checkpoint_every": args.checkpoint_every,
                  "until_epoch": args.until_epoch},
                 model_config, train_config)
    last = history[-1] if history else {}
    print(f"trained {model_config.arch}: epochs={len(history)} "
          f"best_epoch={state.best_epoch} best_val_f1={state.best_f1:.4f} "
          f"last_loss={last.get('loss', float('nan')):.4f}")
    print(f"final model: {os.path.join(out, 'model.fsck')}")
    return 0


def _split_default(state, flag: str | None) -> str:
    if flag is not None:
        return flag
    return "all" if state is None else "test"


def _cmd_eval(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    state, name = _load_predictor(args.ckpt)
    which = _split_default(state, args.split)
    seed = args.split_seed if state is None else _resolved_split_seed(state)
    subset = _pick_split(ds, which, seed)
    probs = _probs_for(state, subset.samples)
    prevs, ys = _eval_arrays(subset.samples)

    protocols = ("clean", "inflated") if args.protocol == "both" else (args.protocol,)
    report_rows = []
    for protocol in protocols:
        report, sweep_rows = evaluate(probs, prevs, ys, protocol, model=name)
        report_rows.append(report.csv_row())
        _write_csv(os.path.join(out, f"sweep_{protocol}.csv"), SWEEP_CSV_HEADER,
                   (f"{r['threshold']:g},{r['tp']},{r['fp']},{r['fn']},{r['tn']},"
                    f"{r['precision']!r},{r['recall']!r},{r['f1']!r}"
                    for r in sweep_rows))
        print(f"{name} [{protocol}] threshold={report.threshold:g} "
              f"precision={report.precision:.4f} recall={report.recall:.4f} "
              f"f1={report.f1:.4f} auc_pr={report.auc_pr:.4f}")
    _write_csv(os.path.join(out, "report.csv"), REPORT_CSV_HEADER, report_rows)
    _echo_config(out, "eval", {"ckpt": args.ckpt, "data": args.data,
                               "split": which, "split_seed": seed,
                               "protocol": args.protocol})
    return 0


def _cmd_audit(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    state, name = _load_predictor(args.ckpt)
    which = _split_default(state, args.split)
    seed = args.split_seed if state is None else _resolved_split_seed(state)
    subset = _pick_split(ds, which, seed)
    probs = _probs_for(state, subset.samples)
    prevs, ys = _eval_arrays(subset.samples)
    audit = inflation_audit(probs, prevs, ys, model=name)
    _write_csv(os.path.join(out, "audit.csv"), AUDIT_CSV_HEADER, [audit_csv_row(audit)])
    _echo_config(out, "audit", {"ckpt": args.ckpt, "data": args.data,
                                "split": which, "split_seed": seed})
    pct = audit["inflation_pct"]
    print(f"{name}: clean_f1={audit['clean'].f1:.4f} "
          f"inflated_f1={audit['inflated'].f1:.4f} "
          f"inflation={'undefined' if pct is None else f'{pct:.1f}%'}")
    return 0


def _cmd_importance(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    state = load_checkpoint(args.ckpt)
    which = args.split or "test"
    subset = _pick_split(ds, which, _resolved_split_seed(state))
    cfg = state.config
    rows, threshold = channel_importance(
        state.model, subset.samples, state.stats,
        sigma_prev=cfg.sigma_prev, sigma_wind=cfg.sigma_wind,
        threshold=args.threshold)
    _write_csv(os.path.join(out, "importance.csv"), IMPORTANCE_CSV_HEADER,
               (f"{r['channel']},{r['group']},{r['baseline_f1']!r},"
                f"{r['masked_f1']!r},{r['delta_f1']!r}" for r in rows))
    _echo_config(out, "importance", {"ckpt": args.ckpt, "data": args.data,
                                     "split": which, "threshold": threshold})
    for r in rows:
        print(f"{r['channel']:<22} {r['group']:<8} delta_f1={r['delta_f1']:+.4f}")
    print(f"baseline_f1={rows[0]['baseline_f1']:.4f} at threshold={threshold:g}")
    return 0


def _cmd_uncertainty(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    state = load_checkpoint(args.ckpt)
    sample = _find_sample(ds, args.sample_id)
    cfg = state.config
    x = normalize(preprocess_x(sample.x, cfg.sigma_prev, cfg.sigma_wind), state.stats)
    result = mc_predict(state.model, x, n_passes=args.passes, seed=args.seed)
    mean_path = os.path.join(out, "uncertainty_mean.fsr")
    std_path = os.path.join(out, "uncertainty_std.fsr")
    save_raster(mean_path, result.mean)
    save_raster(std_path, result.std)
    _echo_config(out, "uncertainty", {"ckpt": args.ckpt, "data": args.data,
                                      "sample_id": sample.id,
                                      "passes": args.passes, "seed": args.seed})
    print(f"sample {sample.id}: {args.passes} stochastic passes, "
          f"mean_prob_max={result.mean.max():.4f} std_max={result.std.max():.4f}")
    print(f"wrote {mean_path} and {std_path}")
    return 0


def _cmd_attention(args) -> int:
    out = _out_dir(args.out)
    ds = load_dataset(args.data)
    state = load_checkpoint(args.ckpt)
    sample = _find_sample(ds, args.sample_id)
    cfg = state.config
    x = normalize(preprocess_x(sample.x, cfg.sigma_prev, cfg.sigma_wind), state.stats)
    maps = export_attention(state.model, x)
    paths = []
    for alpha in maps:
        h, w = alpha.shape
        path = os.path.join(out, f"attention_{h}x{w}.fsr")
        save_raster(path, alpha)
        paths.append(path)
    _echo_config(out, "attention", {"ckpt": args.ckpt, "data": args.data,
                                    "sample_id": sample.id})
    print(f"sample {sample.id}: wrote {len(paths)} gate maps: " + ", ".join(paths))
    return 0


def _cmd_count(args) -> int:
    model_config, _, _ = _resolve_configs(args, args.config)
    model = build(model_config, seed=0)
    param_rows, param_total = count_params(model)
    flop_rows, flop_total = count_flops(model, args.height, args.width)
    print(f"arch={model_config.arch} width_mult={model_config.width_mult:g} "
          f"input={args.height}x{args.width}")
    print(f"params_total={param_total}")
    print(f"flops_total={flop_total}")
    print("published reference totals for the full-scale model: 3.01M parameters, "
          "2.52 GFLOPs at 64x64; deltas come from counting conventions "
          "(1 MAC = 2 FLOPs, bias and activation costs, pool/upsample pricing) "
          "and reference layer details not restated here.")
    if args.out:
        out = _out_dir(args.out)
        _write_csv(os.path.join(out, "params.csv"), "layer,params",
                   [f"{name},{n}" for name, n in param_rows] + [f"TOTAL,{param_total}"])
        _write_csv(os.path.join(out, "flops.csv"), "op,flops,output_shape",
                   [f"{name},{n},{'x'.join(str(d) for d in shape)}"
                    for name, n, shape in flop_rows] + [f"TOTAL,{flop_total},"])
        _echo_config(out, "count", {"height": args.height, "width": args.width},
                     model_config)
    return 0


def _gradcheck_cases(seed: int):
    rng = rng_for(seed, "gradcheck")
    x = Tensor(rng.normal(size=(3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float64))
    b = Tensor(rng.normal(size=(4,)))
    g = Tensor(rng.normal(size=(1, 6, 6)) ** 2 + 0.1)
    pool_in = Tensor(rng.permutation(4 * 6 * 6).astype(np.float64).reshape(4, 6, 6))
    up = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    gamma = Tensor(np.abs(rng.normal(size=(3,))) + 0.5)
    beta = Tensor(rng.normal(size=(3,)))
    off_data = rng.normal(size=(3, 6, 6))
    off_data[np.abs(off_data) < 0.05] += 0.2  # keep relu away from its kink
    off = Tensor(off_data)
    pos = Tensor(np.abs(rng.normal(size=(3, 6, 6))) + 0.5)
    scale = Tensor(rng.normal(size=(3, 6, 6)))
    return [
        ("add", lambda t: (t + t * scale).sum(), x),
        ("mul", lambda t: (t * t).sum(), x),
        ("div", lambda t: (t / Tensor(np.abs(scale.data) + 1.0)).sum(), x),
        ("pow_const", lambda t: T.pow_const(t, 1.5).sum(), pos),
        ("relu", lambda t: T.relu(t).sum(), off),
        ("sigmoid", lambda t: T.sigmoid(t).sum(), x),
        ("softplus", lambda t: T.softplus(t).sum(), x),
        ("mean_all", lambda t: t.mean(), x),
        ("concat_slice", lambda t: T.slice_channels(T.concat_channels(t, t * 2.0), 2, 5).sum(), x),
        ("conv2d", lambda t: T.conv2d(t, w, b, stride=1, padding=1).sum(), x),
        ("maxpool2x2", lambda t: T.maxpool2x2(t).sum(), pool_in),
        ("bilinear_upsample2x", lambda t: T.bilinear_upsample2x(t).sum(), up),
        # a plain sum of a batchnorm is constant in x; weight the map instead
        ("batchnorm", lambda t: (T.batchnorm(t, gamma, beta, np.zeros(3), np.ones(3),
                                             training=True) * scale).sum(), x),
    ]


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    print("op,max_rel_err")
    for name, fn, x in _gradcheck_cases(args.seed):
        x.requires_grad = True
        err = gradient_check(fn, x, step=args.step)
        worst = max(worst, err)
        print(f"{name},{err:.3e}")
    if worst >= 1e-3:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3e}")
    print(f"gradcheck PASS (worst {worst:.3e} < 1e-3)")
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="firesense",
                     description="Wildfire spread prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spread-bias", choices=("N", "S", "E", "W"), default="E")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("stats", help="per-channel normalization stats")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="train")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--sigma-prev", type=float, default=0.8)
    p.add_argument("--sigma-wind", type=float, default=0.4)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--until-epoch", type=int, default=None,
                   help="pause before this epoch index (for resume tests)")
    _add_config_flags(p, CONFIG_KEYS)
    p.set_defaults(func=_cmd_train)

    for name, fn in (("eval", _cmd_eval), ("audit", _cmd_audit)):
        p = sub.add_parser(name, help=f"{name} a predictor on a dataset")
        p.add_argument("--ckpt", required=True,
                       help=f"checkpoint path, or '{DUMMY_PREDICTOR}'")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", choices=("train", "val", "test", "all"), default=None)
        p.add_argument("--split-seed", type=int, default=0,
                       help="only used with the dummy predictor")
        if name == "eval":
            p.add_argument("--protocol", choices=("clean", "inflated", "both"),
                           default="both")
        p.set_defaults(func=fn)

    p = sub.add_parser("importance", help="channel-masking importance table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_importance)

    p = sub.add_parser("uncertainty", help="MC-dropout mean/std rasters")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-id", type=int, default=None)
    p.add_argument("--passes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_uncertainty)

    p = sub.add_parser("attention", help="export fusion gate maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-id", type=int, default=None)
    p.set_defaults(func=_cmd_attention)

    p = sub.add_parser("count", help="parameter and FLOP tables")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    _add_config_flags(p, CONFIG_KEYS)
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (_UsageError, ConfigurationError, UnsupportedArchitectureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, ShapeMismatchError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except FireSenseError as e:  # anything else from this package is a usage problem
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
