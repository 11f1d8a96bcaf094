"""Command-line entry point.

Subcommands: ``generate``, ``train``, ``predict``, ``evaluate``,
``baseline threshold``, ``audit grad`` and ``export``.  Training options are
resolved as flags > ``--config`` JSON file > built-in defaults.  Every run
writes a manifest next to its outputs.  Exit codes: 0 success, 1 domain
error (JSON message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, export, persist, train
from .errors import InvStoreError
from .storage import StorageParams

log = logging.getLogger("invstore")

# CLI flag -> TrainConfig field
TRAIN_FLAGS = {
    "qp_tol": "qp_tol", "qp_max_iter": "qp_max_iter", "qp_reg": "qp_reg",
    "scp_max_iter": "scp_max_iter", "scp_tol": "scp_tol", "grad_fd_check": "grad_fd_check",
    "seed": "seed", "lr": "learning_rate", "epochs": "max_epochs", "restarts": "restarts",
    "icnn_mode": "icnn_mode", "optimizer": "optimizer", "smoothing": "smoothing",
    "p_max": "p_max",
}


@dataclass
class RunManifest:
    command: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def file_hash(path) -> str:
    """SHA-256 of a file, or of the sorted (name, hash) list of a directory's files."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != "manifest.json"):
            h.update(str(f.relative_to(path)).encode())
            h.update(file_hash(f).encode())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() or not out.suffix else out.with_name(out.name + ".manifest.json")


def resolve_config(args) -> train.TrainConfig:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvStoreError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InvStoreError("config file must hold a JSON object")
    for flag, name in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[name] = val
    try:
        return train.TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise InvStoreError(f"invalid configuration: {exc}") from exc


# ------------------------------------------------------------------ commands

def cmd_generate(args):
    out = Path(args.out)
    if args.model == "equality":
        ds = data.generate_equality(seed=args.seed, n_samples=args.n_train + args.n_test)
        n = args.n_train
        tr = data.EqualityData(ds.prices[:n], ds.responses[:n], ds.A, ds.alpha, ds.b)
        te = data.EqualityData(ds.prices[n:], ds.responses[n:], ds.A, ds.alpha, ds.b)
        outputs = [data.write_equality(tr, out / "train" / data.EQUALITY_FILE),
                   data.write_equality(te, out / "test" / data.EQUALITY_FILE)]
    else:
        if args.model == "uq":
            tr, te, truth = data.generate_synthetic("quadratic", seed=args.seed, n_train=args.n_train,
                                                    n_test=args.n_test, T=80, dt=0.5, p_max=1.1,
                                                    capacity=2.22)
        else:
            tr, te, truth = data.generate_synthetic(args.model, seed=args.seed, n_train=args.n_train,
                                                    n_test=args.n_test)
        if args.noise:
            tr = tr.with_noise(args.noise, seed=args.seed)
        data.write_dataset(tr, out / "train")
        data.write_dataset(te, out / "test")
        outputs = [out / "train", out / "test", persist.save_model(truth, out / "truth.json")]
    RunManifest(_command(args), vars_clean(args), args.seed, {}, [str(p) for p in outputs]).write(out / "manifest.json")
    print(f"wrote {out}")
    return 0


def _load_storage_data(path, schema):
    return data.load_dataset(path, schema)


def cmd_train(args):
    config = resolve_config(args)
    out = Path(args.out)
    inputs = {args.data: file_hash(args.data)}
    if args.test:
        inputs[args.test] = file_hash(args.test)
    if args.model == "equality":
        tr = data.load_equality(args.data)
        if args.optimizer is None and "optimizer" not in _config_keys(args):
            config.optimizer = "gd"
        report = train.train_equality(tr, config)
    else:
        tr = _load_storage_data(args.data, args.schema)
        te = _load_storage_data(args.test, args.schema) if args.test else None
        if args.model == "quadratic":
            report = train.train_quadratic(tr, config, te)
        else:
            start = None
            if args.start:
                start = persist.load_model(args.start)
                if not isinstance(start, StorageParams):
                    raise InvStoreError("--start must be a quadratic or soc model file")
                inputs[args.start] = file_hash(args.start)
            report = train.train_generic(tr, config, te, start=start)
    persist.save_model(report.model, out)
    loss_csv = export.export_loss(report, out.with_suffix(".loss.csv"))
    test = dict(report.test_mse)
    print("epoch,train_mse,test_mse")
    for e, v in enumerate(report.train_loss, start=1):
        t = test.get(e)
        print(f"{e},{v:.10g},{'' if t is None else format(t, '.10g')}")
    summary = {"best_restart": report.best_restart, "restart_losses": report.restart_losses,
               "wall_clock": report.wall_clock, "grad_audit": report.grad_audit}
    log.info("summary %s", json.dumps(summary))
    RunManifest(_command(args), config.to_dict(), config.seed, inputs,
                [str(out), str(loss_csv)]).write(manifest_path(out))
    return 0


def _config_keys(args):
    if not getattr(args, "config", None):
        return set()
    return set(json.loads(Path(args.config).read_text()))


def _forecast(model, args, config):
    if isinstance(model, train.EqualityModel):
        ds = data.load_equality(args.data)
        return ds, train.predict(model, ds.prices, config.settings, config)
    ds = _load_storage_data(args.data, args.schema)
    return ds, train.predict(model, ds.prices, config.settings, config)


def cmd_predict(args):
    config = resolve_config(args)
    model = persist.load_model(args.model)
    ds, y = _forecast(model, args, config)
    out = Path(args.out)
    if isinstance(model, train.EqualityModel):
        data.write_equality(data.EqualityData(ds.prices, y, model.A), out / data.EQUALITY_FILE)
    else:
        data.write_dataset(data.Dataset(ds.prices, y, ds.dt, {"source": "forecast", "model": args.model}), out)
    RunManifest(_command(args), config.to_dict(), config.seed,
                {args.model: file_hash(args.model), args.data: file_hash(args.data)},
                [str(out)]).write(manifest_path(out))
    print(f"wrote {out}")
    return 0


def _load_any(path, schema):
    p = Path(path)
    if (p / data.EQUALITY_FILE).exists() or p.name == data.EQUALITY_FILE:
        return data.load_equality(p)
    return data.load_dataset(p, schema)


def cmd_evaluate(args):
    fc = _load_any(args.forecast, args.schema)
    obs = _load_any(args.data, args.schema)
    if fc.prices.shape != obs.prices.shape or not np.array_equal(fc.prices, obs.prices):
        raise InvStoreError("forecast and observations cover different price windows")
    if isinstance(obs, data.EqualityData):
        err = fc.responses - obs.responses
        metrics = {"mse": float(np.mean(err ** 2)),
                   "correlation": train.correlation(fc.responses, obs.responses)}
    else:
        metrics = train.evaluate(fc.responses, obs.responses)
    metrics["n_samples"] = int(len(obs.prices))
    if args.json:
        print(json.dumps(metrics))
    else:
        corr = metrics["correlation"]
        print(f"mse {metrics['mse']:.6g}")
        print(f"correlation {'undefined' if corr is None else format(corr, '.6g')}")
    return 0


def cmd_baseline(args):
    tr = _load_storage_data(args.train, args.schema)
    te = _load_storage_data(args.test, args.schema)
    config = train.TrainConfig(p_max=args.p_max)
    p_max, _ = train.infer_power_bounds(tr, config)
    if args.e_min is not None and args.e_max is not None:
        lo, hi = args.e_min, args.e_max
    else:
        lo, hi = train._energy_envelope(tr, args.eta_sq)
    rule = data.fit_threshold(tr)
    y = data.threshold_baseline(tr, te.prices, p_max, lo, hi, eta_sq=args.eta_sq, rule=rule)
    metrics = train.evaluate(y, te.responses)
    metrics.update(r_charge=rule.r_charge, r_discharge=rule.r_discharge)
    if args.out:
        out = Path(args.out)
        data.write_dataset(data.Dataset(te.prices, y, te.dt, {"source": "threshold baseline"}), out)
        RunManifest(_command(args), vars_clean(args), None,
                    {args.train: file_hash(args.train), args.test: file_hash(args.test)},
                    [str(out)]).write(manifest_path(out))
    print(json.dumps(metrics))
    return 0


def cmd_audit(args):
    config = resolve_config(args)
    ds = _load_storage_data(args.data, args.schema)
    rng = np.random.default_rng(config.seed)
    errors = []
    for _ in range(args.instances):
        idx = rng.choice(len(ds), size=min(args.batch, len(ds)), replace=False)
        if args.model == "quadratic":
            params = train._template(ds, config).with_learned(
                train.project_scalars(train._random_scalars(rng, ds, config), config))
            errors.append(train.audit_quadratic(params, ds, idx=idx))
        else:
            model = train.init_generic(rng, ds, config)
            errors.append(train.audit_generic(model, ds, idx=idx, seed=int(rng.integers(2**31))))
    worst = float(max(errors))
    limit = args.limit if args.limit is not None else (1e-4 if args.model == "quadratic" else 1e-3)
    print(json.dumps({"model": args.model, "instances": args.instances, "max_rel_error": worst,
                      "limit": limit, "pass": worst <= limit}))
    return 0 if worst <= limit else 1


def cmd_export(args):
    config = resolve_config(args)
    model = persist.load_model(args.model)
    ds = _load_storage_data(args.data, args.schema)
    out = Path(args.out)
    outputs = []
    if isinstance(model, train.GenericModel):
        res = train._generic_forward(model, ds.prices, config)
        y = res.y
        outputs.append(export.export_scp(res.traces, out / "scp_trace.csv"))
    else:
        y = train.predict(model, ds.prices, config.settings, config)
    outputs.append(export.export_dispatch(ds.prices, ds.responses, y, out / "dispatch.csv"))
    RunManifest(_command(args), config.to_dict(), config.seed,
                {args.model: file_hash(args.model), args.data: file_hash(args.data)},
                [str(p) for p in outputs]).write(out / "manifest.json")
    print(f"wrote {out}")
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "argv") and not callable(v)}


def _command(args) -> list:
    return ["invstore", *args.argv]


# ------------------------------------------------------------------ parser

def _add_train_flags(p):
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--qp-tol", type=float)
    p.add_argument("--qp-max-iter", type=int)
    p.add_argument("--qp-reg", type=float)
    p.add_argument("--scp-max-iter", type=int)
    p.add_argument("--scp-tol", type=float)
    p.add_argument("--grad-fd-check", action="store_true", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--icnn-mode", choices=["scalar", "soc", "vector"])
    p.add_argument("--optimizer", choices=["adam", "gd"])
    p.add_argument("--smoothing", type=float)
    p.add_argument("--p-max", type=float)


def _schema(p):
    p.add_argument("--schema", choices=sorted(data.SCHEMA_DT), default="daily")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invstore", description="Identify energy-storage agents from price and dispatch data.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise a train/test dataset")
    p.add_argument("--model", choices=["quadratic", "soc", "uq", "equality"], default="quadratic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise on training responses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="identify a model from observed dispatch")
    p.add_argument("--model", choices=["quadratic", "generic", "equality"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True, help="model file (JSON)")
    p.add_argument("--start", help="quadratic model file seeding the first generic restart")
    _schema(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast dispatch for the price windows in --data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _schema(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="MSE and correlation of a forecast")
    p.add_argument("--forecast", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    _schema(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="rule-based baselines")
    bsub = p.add_subparsers(dest="baseline", required=True)
    b = bsub.add_parser("threshold", help="median activated price-ratio rule")
    b.add_argument("--train", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--out")
    b.add_argument("--p-max", type=float)
    b.add_argument("--eta-sq", type=float, default=1.0)
    b.add_argument("--e-min", type=float)
    b.add_argument("--e-max", type=float)
    _schema(b)
    b.set_defaults(func=cmd_baseline)

    p = sub.add_parser("audit", help="finite-difference checks")
    asub = p.add_subparsers(dest="audit", required=True)
    a = asub.add_parser("grad", help="analytic loss gradient against central differences")
    a.add_argument("--data", required=True)
    a.add_argument("--model", choices=["quadratic", "generic"], default="quadratic")
    a.add_argument("--instances", type=int, default=5)
    a.add_argument("--batch", type=int, default=2)
    a.add_argument("--limit", type=float)
    _schema(a)
    _add_train_flags(a)
    a.set_defaults(func=cmd_audit)

    p = sub.add_parser("export", help="plot-data CSVs: dispatch overlay and SCP traces")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _schema(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)   # exits with code 2 on usage errors
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvStoreError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
