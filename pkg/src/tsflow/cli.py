"""``tsflow`` command line: synth, train, forecast, sample, eval {w2, lps, wstudy}.

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tsflow import __version__, cfm, metrics, net, ot
from tsflow.config import ConfigError, RunConfig, load_config, parse_overrides
from tsflow.data import (
    DataError,
    Dataset,
    SyntheticSpec,
    fit_normalizer,
    gen_synthetic,
    make_windows,
    write_csv,
    write_jsonl,
)
from tsflow.gp import CovarianceError, KernelSpec, build_cov, gp_sample, normalize_times
from tsflow.sampling import MODES, euler_integrate, forecast_batch, model_field

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
CHECKPOINT_NAME = "model.ckpt"


class UsageError(ValueError):
    pass


# -- output helpers ------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, files: list[Path]) -> Path:
    """``manifest.json`` listing each produced file with its sha256."""
    entries = {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(files)}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"command": command, "version": __version__, "files": entries},
                               indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def read_matrix_csv(path) -> np.ndarray:
    """Read a wide sample file (``sample_idx,v0,v1,...``) into an array."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"{path}: empty file")
    width = len(rows[0]) - 1
    try:
        data = [[float(v) for v in r[1:]] for r in rows[1:]]
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return np.asarray(data, dtype=np.float64).reshape(len(data), width)


def write_matrix_csv(path: Path, samples: np.ndarray) -> Path:
    L = samples.shape[1]
    return _write_rows(
        path, ["sample_idx"] + [f"v{k}" for k in range(L)],
        ([i] + [_fmt(v) for v in row] for i, row in enumerate(samples)),
    )


# -- model / data plumbing ---------------------------------------------------


def _config_for_checkpoint(extra: dict, config_path, overrides) -> RunConfig:
    if config_path is None and "config" not in extra:
        raise UsageError("checkpoint holds no config; pass --config")
    if config_path is not None:
        return load_config(config_path, overrides)
    # the snapshot stored at training time, overrides on top
    return load_config(overrides=overrides, base=extra["config"])


def _check_compatible(model: net.VectorFieldModel, cfg: RunConfig, uncond_context=None):
    m = model.config
    C = uncond_context or cfg.context_len
    expected = (C + cfg.pred_len, cfg.tree["model"]["hidden_dim"], cfg.tree["model"]["num_blocks"])
    got = (m.length, m.hidden_dim, m.num_blocks)
    if expected != got:
        raise UsageError(
            f"checkpoint/config mismatch: checkpoint (length, hidden_dim, num_blocks) = {got}, "
            f"config gives {expected}"
        )


def _load(args):
    overrides = parse_overrides(args.overrides)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _, extra = net.load_checkpoint(ckpt)
    cfg = _config_for_checkpoint(extra, args.config, overrides)
    return model, cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.output_dir) if getattr(args, "output_dir", None) else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> list[Path]:
    spec = SyntheticSpec(
        kind=args.kind, n_series=args.n_series, length=args.length, period=args.period,
        noise_std=args.noise_std, seed=args.seed, context_len=args.context_len, pred_len=args.pred_len,
    )
    if spec.kind not in ("sine-mix", "ar1", "ou-path"):
        raise UsageError(f"unknown synthetic kind {spec.kind!r}")
    ds = gen_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_jsonl if args.format == "jsonl" else write_csv)(ds, out)
    return [out]


def cmd_train(args) -> list[Path]:
    cfg = load_config(args.config, parse_overrides(args.overrides))
    ds = cfg.load_dataset()
    out = _out_dir(args, cfg)
    snapshot = out / "config.resolved.yaml"
    if cfg.conditional:
        result = cfm.train_cond(ds, cfg.train, cfg.sampler)
    else:
        result = cfm.train_uncond(ds, cfg.train)
    ckpt = out / CHECKPOINT_NAME
    net.save_checkpoint(result.model, result.opt, ckpt, extra={"config": cfg.tree})
    log = _write_rows(
        out / "metrics.csv", ["epoch", "loss", "val_crps"],
        ([h["epoch"], _fmt(h["loss"]), _fmt(h["val_crps"])] for h in result.history),
    )
    snapshot.write_text(cfg.to_yaml())
    return [ckpt, log, snapshot]


def _uncond_prior(model: net.VectorFieldModel, cfg: RunConfig, period: int):
    return build_cov(cfg.prior, normalize_times(np.arange(model.config.length), period))


def cmd_forecast(args) -> list[Path]:
    model, cfg = _load(args)
    mode = args.mode or ("cond-direct" if model.conditional else "uncond-cps-guided")
    if mode == "cond-direct" and not model.conditional:
        raise UsageError("mode 'cond-direct' needs a conditional checkpoint; this one is unconditional")
    if mode == "uncond-cps-guided" and model.conditional:
        raise UsageError("mode 'uncond-cps-guided' needs an unconditional checkpoint; this one is conditional")
    _check_compatible(model, cfg, None if model.conditional else cfg.train.uncond_context)
    n = cfg.sampler.n_samples if args.n_samples is None else args.n_samples
    if n < 0:
        raise UsageError("--n-samples must be >= 0")
    ds = cfg.load_dataset()
    out = _out_dir(args, cfg)
    inference = model.inference_view()
    stats = fit_normalizer(ds, cfg.train.normalization, cfg.train.norm_scope)
    lags = cfg.train.lags if model.conditional else ()
    windows, past, lag_arr, futures, anchors, norms = cfm.eval_windows(ds, stats, args.split, lags)
    P = cfg.pred_len
    if mode == "cond-direct":
        prior = cfm.make_gpr_prior(cfg.prior, cfg.context_len, P, ds.period)
    else:
        prior = _uncond_prior(model, cfg, ds.period)
        past = past[:, past.shape[1] - (model.config.length - P):]
    samples = forecast_batch(inference, past, n, mode, cfg.sampler, prior=prior, lag_features=lag_arr)
    preds = [st.invert(s, a) for s, st, a in zip(samples, norms, anchors)]

    rows = (
        [w.series_id, w.offset, i, h, _fmt(p[i, h])]
        for w, p in zip(windows, preds) for i in range(n) for h in range(P)
    )
    fc = _write_rows(out / "forecast.csv", ["series_id", "offset", "sample_idx", "h", "value"], rows)
    report_rows, quant = [], []
    for w, p, y in zip(windows, preds, futures):
        entry = {"series_id": w.series_id, "offset": w.offset}
        if n > 0:
            qf = metrics.QuantileForecast.from_samples(p)
            entry["quantiles"] = {f"{lv:.1f}": qf.quantiles[k].tolist() for k, lv in enumerate(qf.levels)}
            report_rows.append([w.series_id, w.offset, _fmt(metrics.crps(qf, y))])
        quant.append(entry)
    qpath = _write_json(out / "quantiles.json", {"split": args.split, "mode": mode, "windows": quant})
    files = [fc, qpath]
    if n > 0:
        total = metrics.weighted_crps(preds, futures)
        report_rows.append(["ALL", "", _fmt(total)])
        files.append(_write_rows(out / "crps.csv", ["series_id", "offset", "crps"], report_rows))
        files.append(_write_json(out / "crps.json", {
            "split": args.split, "mode": mode, "n_samples": n, "weighted_crps": total,
            "per_window": [{"series_id": r[0], "offset": r[1], "crps": float(r[2])} for r in report_rows[:-1]],
        }))
    return files


def cmd_sample(args) -> list[Path]:
    model, cfg = _load(args)
    if model.conditional:
        raise UsageError("sample needs an unconditional checkpoint")
    if args.n < 0:
        raise UsageError("-n must be >= 0")
    period = cfg.tree["dataset"]["period"]
    out = _out_dir(args, cfg)
    L = model.config.length
    if args.n == 0:
        samples = np.zeros((0, L))
    else:
        x0 = gp_sample(_uncond_prior(model, cfg, period), args.n, np.random.default_rng(cfg.seed))
        samples = euler_integrate(model_field(model.inference_view()), x0, cfg.sampler.ode_steps)
    spath = write_matrix_csv(out / "samples.csv", samples)
    # a few generated sequences next to a few training windows, for plotting
    ds = cfg.load_dataset()
    stats = fit_normalizer(ds, cfg.train.normalization, cfg.train.norm_scope)
    real = cfm.normalized_series(ds, stats)
    plot = {
        "length": L,
        "generated": samples[: args.plot_count].tolist(),
        "real": [v[:L].tolist() for v in real[: args.plot_count] if len(v) >= L],
    }
    return [spath, _write_json(out / "plot_data.json", plot)]


def cmd_eval_w2(args) -> list[Path]:
    a, b = read_matrix_csv(args.a), read_matrix_csv(args.b)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"sample widths differ: {a.shape[1]} vs {b.shape[1]}")
    n = min(len(a), len(b))
    B = min(args.batch, n)
    if B < 1:
        raise UsageError("need at least one sample in each file")
    values = [ot.batch_w2(a[k : k + B], b[k : k + B]) for k in range(0, n - B + 1, B)]
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    w2 = float(np.mean(values))
    rows = [[k, _fmt(v)] for k, v in enumerate(values)] + [["mean", _fmt(w2)]]
    return [
        _write_rows(out / "w2.csv", ["batch", "w2"], rows),
        _write_json(out / "w2.json", {"batch": B, "n_batches": len(values), "w2": w2}),
    ]


def cmd_eval_lps(args) -> list[Path]:
    cfg = load_config(args.config, parse_overrides(args.overrides))
    synth = read_matrix_csv(args.samples)
    ds = cfg.load_dataset()
    out = _out_dir(args, cfg)
    C, P = cfg.context_len, cfg.pred_len
    stats = fit_normalizer(ds, cfg.train.normalization, cfg.train.norm_scope)
    by_id = {s.id: k for k, s in enumerate(ds.series)}
    past, fut = [], []
    for w in make_windows(ds, 1, "test"):
        st = stats[by_id[w.series_id]]
        past.append(st.apply(w.past, w.start_index))
        fut.append(st.apply(w.future, w.start_index + C))
    score = metrics.lps(synth, np.asarray(past), np.asarray(fut), C, P)
    return [
        _write_rows(out / "lps.csv", ["metric", "value"], [["lps", _fmt(score)]]),
        _write_json(out / "lps.json", {"lps": score, "context_len": C, "pred_len": P,
                                       "n_synthetic": len(synth), "n_test_windows": len(past)}),
    ]


def cmd_eval_wstudy(args) -> list[Path]:
    cfg = load_config(args.config, parse_overrides(args.overrides))
    kernels = [KernelSpec(k.strip()) for k in args.kernels.split(",")]
    multiples = [int(m) for m in args.multiples.split(",")]
    ds: Dataset = cfg.load_dataset()
    out = _out_dir(args, cfg)
    stats = fit_normalizer(ds, cfg.train.normalization, cfg.train.norm_scope)
    values = cfm.normalized_series(ds, stats)
    rows = metrics.wasserstein_study(values, ds.period, kernels, multiples,
                                     batch=args.batch, trials=args.trials, seed=cfg.seed)
    cols = ["kernel", "length_scale", "multiple", "length", "w2", "random", "ratio"]
    return [
        _write_rows(out / "wstudy.csv", cols, ([r[c] for c in cols] for r in rows)),
        _write_json(out / "wstudy.json", {"rows": rows}),
    ]


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tsflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--kind", default="sine-mix", choices=["sine-mix", "ar1", "ou-path"])
    s.add_argument("--n-series", type=int, default=8)
    s.add_argument("--length", type=int, default=480)
    s.add_argument("--period", type=int, default=24)
    s.add_argument("--noise-std", type=float, default=0.1)
    s.add_argument("--context-len", type=int, default=24)
    s.add_argument("--pred-len", type=int, default=24)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="forecast every window of a split")
    f.add_argument("checkpoint")
    f.add_argument("--config")
    f.add_argument("--split", default="test", choices=["train", "val", "test"])
    f.add_argument("--n-samples", type=int)
    f.add_argument("--mode", choices=MODES)
    f.add_argument("--output-dir")
    f.set_defaults(func=cmd_forecast)

    sm = sub.add_parser("sample", help="draw unconditional samples")
    sm.add_argument("checkpoint")
    sm.add_argument("--config")
    sm.add_argument("-n", type=int, default=10000)
    sm.add_argument("--plot-count", type=int, default=16)
    sm.add_argument("--output-dir")
    sm.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluation drivers")
    es = e.add_subparsers(dest="eval_command", required=True)
    w2 = es.add_parser("w2", help="mini-batch W2^2 between two sample files")
    w2.add_argument("a")
    w2.add_argument("b")
    w2.add_argument("--batch", type=int, default=64)
    w2.add_argument("--output-dir", default=".")
    w2.set_defaults(func=cmd_eval_w2)
    lp = es.add_parser("lps", help="linear predictive score of a sample file")
    lp.add_argument("samples")
    lp.add_argument("--config")
    lp.add_argument("--output-dir")
    lp.set_defaults(func=cmd_eval_lps)
    ws = es.add_parser("wstudy", help="prior-to-data W2^2 ratio table")
    ws.add_argument("--config")
    ws.add_argument("--kernels", default="isotropic,SE,OU,PE")
    ws.add_argument("--multiples", default="1,2,4")
    ws.add_argument("--batch", type=int, default=64)
    ws.add_argument("--trials", type=int, default=8)
    ws.add_argument("--output-dir")
    ws.set_defaults(func=cmd_eval_wstudy)
    return p


def _command_name(args) -> str:
    return args.command + (f" {args.eval_command}" if args.command == "eval" else "")


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key value`` / ``--section.key=value`` pairs out of ``argv``."""
    plain, over = [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        name = tok[2:].split("=", 1)[0]
        if tok.startswith("--") and "." in name:
            if "=" in tok or i + 1 >= len(argv):
                over.append(tok)
                i += 1
            else:
                over.extend(argv[i : i + 2])
                i += 2
        else:
            plain.append(tok)
            i += 1
    return plain, over


def main(argv=None) -> int:
    parser = build_parser()
    plain, over = split_overrides(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(plain)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for numerical failures here
        return EXIT_INVALID if exc.code else EXIT_OK
    args.overrides = over
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if over and args.func in (cmd_synth, cmd_eval_w2):
        print(f"error: unrecognized arguments: {' '.join(over)}", file=sys.stderr)
        return EXIT_INVALID
    try:
        files = args.func(args)
        if files:
            write_manifest(files[0].parent, _command_name(args), files)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, CovarianceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, net.CheckpointError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
