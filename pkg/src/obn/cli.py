"""``obn`` command line: train, eval, count, sweep, gradcheck, analyze.

Settings come from three layers, later ones winning: built-in defaults, a
flat ``key=value`` config file (``--config``), then command-line flags
(``--set key=value`` and the named flags such as ``--lr``).

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data or
checkpoint error, 4 numerical abort.
"""
import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import analyze, data
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, NumericalError
from .models import build, count, spec_from_name
from .train import TrainConfig, Trainer, derive_seed, evaluate, load_state_dict, spec_from_state

EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NAN = 1, 2, 3, 4

CHECKPOINT = "checkpoint.obn"


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _ints(v):
    return tuple(int(x) for x in str(v).split(",") if x.strip())


# key -> (parser, default)
KEYS = {
    "model.name": (str, "ResNet20-S8U1"),
    "model.bn_order": (str, "post_act"),
    "model.basis_bn": (_bool, True),
    "model.share_bn": (_bool, False),
    "model.basis_init": (str, "orthogonal"),
    "data.name": (str, "cifar10"),
    "data.dir": (str, ""),
    "data.subset": (int, 0),
    "data.test_subset": (int, 0),
    "data.snr": (float, 2.0),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 128),
    "train.lr": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.gamma": (float, 0.1),
    "train.milestones": (_floats, (0.5, 0.75)),
    "train.augment": (_bool, True),
    "train.dtype": (str, "float32"),
    "train.seed": (int, 0),
    "ortho.lambda": (float, 1e-3),
    "analyze.gradflow_every": (int, 10),
    "analyze.similarity": (_bool, True),
    "analyze.spectral": (_bool, True),
    "analyze.deviation": (_bool, True),
    "analyze.spectral_n": (int, 20),
    "analyze.spectral_trials": (int, 8),
    "sweep.s_list": (_ints, (8, 16, 32)),
    "sweep.u_list": (_ints, (0, 1, 2, 4)),
    "out.dir": (str, "obn-out"),
}

FLAG_KEYS = {
    "model": "model.name",
    "dataset": "data.name",
    "data_dir": "data.dir",
    "subset": "data.subset",
    "test_subset": "data.test_subset",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "lam": "ortho.lambda",
    "seed": "train.seed",
    "dtype": "train.dtype",
    "out_dir": "out.dir",
    "gradflow_every": "analyze.gradflow_every",
    "s_list": "sweep.s_list",
    "u_list": "sweep.u_list",
}


def parse_config_text(text, source="<config>"):
    """``{key: raw string}`` from ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key, value, source):
    if key not in KEYS:
        raise ConfigError(f"{source}: unknown key {key!r}")
    if not isinstance(value, str):
        return value
    try:
        return KEYS[key][0](value)
    except ValueError as e:
        raise ConfigError(f"{source}: bad value for {key}: {e}") from e


def resolve_config(path=None, sets=(), flags=None):
    """Merge defaults < config file < ``--set`` < named flags into a typed dict."""
    cfg = {k: d for k, (_, d) in KEYS.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        for k, v in parse_config_text(p.read_text(), str(p)).items():
            cfg[k] = _coerce(k, v, str(p))
    for item in sets:
        for k, v in parse_config_text(item, "--set").items():
            cfg[k] = _coerce(k, v, "--set")
    for attr, key in FLAG_KEYS.items():
        v = (flags or {}).get(attr)
        if v is not None:
            cfg[key] = _coerce(key, v, f"--{attr.replace('_', '-')}")
    if not cfg["data.dir"]:
        cfg["data.dir"] = os.environ.get("OBN_DATA_DIR", "")
    return cfg


def _train_config(cfg):
    return TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       milestones=cfg["train.milestones"], gamma=cfg["train.gamma"],
                       momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"],
                       ortho_lambda=cfg["ortho.lambda"], seed=cfg["train.seed"], dtype=cfg["train.dtype"],
                       augment=cfg["train.augment"])


def load_datasets(cfg):
    """Train/test :class:`~obn.data.Dataset` pair per ``data.*`` keys."""
    name = cfg["data.name"]
    if name == "synthetic":
        n_train = cfg["data.subset"] or 5000
        n_test = cfg["data.test_subset"] or 1000
        seed = derive_seed(cfg["train.seed"], "synthetic")
        return data.synthetic_pair(10, n_train, n_test, seed=seed, snr=cfg["data.snr"])
    if name not in ("cifar10", "cifar100", "mnist"):
        raise ConfigError(f"unknown dataset {name!r}")
    train, test = data.load(name, cfg["data.dir"] or None)
    if cfg["data.subset"]:
        train = train.subset(cfg["data.subset"])
    if cfg["data.test_subset"]:
        test = test.subset(cfg["data.test_subset"])
    return train, test


def model_spec(cfg, name=None, dataset=None):
    opts = dict(bn_order=cfg["model.bn_order"], basis_bn=cfg["model.basis_bn"], share_bn=cfg["model.share_bn"])
    if dataset is not None:
        _, c, h, _ = dataset.images.shape
        opts.update(classes=dataset.num_classes, in_channels=c, input_size=h)
    return spec_from_name(name or cfg["model.name"], **opts)


def _dtype(cfg):
    if cfg["train.dtype"] not in ("float32", "float64"):
        raise ConfigError(f"train.dtype must be float32 or float64, got {cfg['train.dtype']!r}")
    return np.dtype(cfg["train.dtype"])


def run_training(cfg, out_dir, spec=None, datasets=None, log=print):
    """Train per ``cfg``, writing every enabled output into ``out_dir``; returns the final metrics row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec is None:
        model_spec(cfg)  # fail on a bad name before touching data
    train_set, test_set = datasets or load_datasets(cfg)
    spec = spec or model_spec(cfg, dataset=train_set)
    tcfg = _train_config(cfg)
    net = build(spec, derive_seed(tcfg.seed, "init"), _dtype(cfg), cfg["model.basis_init"])
    trainer = Trainer(net, tcfg)
    flow = analyze.record_grad_flow(trainer, cfg["analyze.gradflow_every"]) if cfg["analyze.gradflow_every"] else None
    dev = analyze.ortho_deviation_trace(trainer) if cfg["analyze.deviation"] and net.bases() else None
    fields = ["epoch", "lr", "train_loss", "train_error", "test_loss", "test_error", "ortho_penalty"]
    rows = []
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for _ in range(tcfg.epochs):
            m = trainer.train_epoch(train_set)
            ev = evaluate(net, test_set)
            m.update(test_loss=ev["loss"], test_error=ev["error"])
            rows.append(m)
            w.writerow([m["epoch"]] + [repr(float(m[k])) for k in fields[1:]])
            f.flush()
            save_checkpoint(trainer, out / CHECKPOINT)
            log(f"epoch {m['epoch']:3d}  lr {m['lr']:.4g}  loss {m['train_loss']:.4f}  "
                f"train err {m['train_error']:.2f}%  test err {m['test_error']:.2f}%")
    if flow is not None:
        flow.write_csv(out / "gradflow.csv")
    if dev is not None:
        dev.write_csv(out / "deviation.csv")
    if net.bases():
        if cfg["analyze.similarity"]:
            analyze.network_similarity(net).write_csv(out / "similarity.csv")
        if cfg["analyze.spectral"]:
            write_spectral(net, out, cfg["analyze.spectral_n"], cfg["analyze.spectral_trials"],
                           derive_seed(tcfg.seed, "spectral"))
    return rows[-1]


def write_spectral(net, out, n=20, trials=8, seed=0):
    """``spectral.csv`` (norm ratios) and ``singular_values.csv`` for every shared basis."""
    out = Path(out)
    (out / "spectral.csv").unlink(missing_ok=True)
    with open(out / "singular_values.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["basis_id", "index", "sigma"])
        for basis_id, basis in net.bases():
            m = basis.matrix(0)
            mode = "product" if m.shape[0] == m.shape[1] else "gram"
            rep = analyze.spectral_probe(m, n, trials, seed, mode)
            rep.write_csv(out / "spectral.csv", prefix=f"{basis_id}/")
            for i, sv in enumerate(rep.singular_values):
                w.writerow([basis_id, i, repr(float(sv))])


# --- subcommands ------------------------------------------------------------------------------


def cmd_train(args):
    cfg = resolve_config(args.config, args.set, vars(args))
    run_training(cfg, cfg["out.dir"])
    return 0


def cmd_eval(args):
    cfg = resolve_config(args.config, args.set, vars(args))
    state = _read_checkpoint(args.checkpoint)
    spec = spec_from_state(state)
    net = build(spec, 0, np.dtype(state[next(k for k in state if k.startswith("param/"))].dtype))
    load_state_dict(net, state)
    _, test_set = load_datasets(cfg)
    ev = evaluate(net, test_set)
    print(f"model,{spec.name}\ntest_error,{ev['error']!r}\ntest_loss,{ev['loss']!r}")
    return 0


def cmd_count(args):
    target = args.target
    if Path(target).is_file():
        target = resolve_config(target)["model.name"]
    opts = {"classes": args.classes}
    if args.geometry:
        opts["geometry"] = args.geometry
    spec = spec_from_name(target, **opts)
    rep = count(spec, args.input_size)
    if not args.csv_only:
        print(rep.table())
        print(f"{spec.name}: {rep.params / 1e6:.2f}M params, {rep.flops / 1e9:.3f}G FLOPs")
    print(f"{spec.name},{rep.params},{rep.flops}")
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args.config, args.set, vars(args))
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    base = spec_from_name(cfg["model.name"])
    if not base.s:
        raise ConfigError("sweep needs a factorized base model (ResNet<L>-S<s>U<u>)")
    if not cfg["sweep.s_list"] or not cfg["sweep.u_list"]:
        raise ConfigError("s and u lists must be non-empty")
    datasets = None
    header = ["model", "s", "u", "params", "flops", "train_error", "test_error", "status"]
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for s in cfg["sweep.s_list"]:
            for u in cfg["sweep.u_list"]:
                row = {"model": f"s={s},u={u}", "s": s, "u": u, "params": "", "flops": "",
                       "train_error": "", "test_error": "", "status": "ok"}
                try:
                    spec = base.with_ranks(s, u)
                    row["model"] = spec.name
                    rep = count(spec)
                    row["params"], row["flops"] = rep.params, rep.flops
                    if args.count_only:
                        row["status"] = "count-only"
                    else:
                        datasets = datasets or load_datasets(cfg)
                        spec = model_spec(cfg, spec.name, datasets[0])
                        m = run_training(cfg, out / f"s{s}_u{u}", spec, datasets, log=lambda *_: None)
                        row["train_error"], row["test_error"] = repr(m["train_error"]), repr(m["test_error"])
                except (ConfigError, FormatError, FileNotFoundError, NumericalError) as e:
                    row["status"] = f"error: {type(e).__name__}: {e}"
                w.writerow([row[k] for k in header])
                f.flush()
                print(",".join(str(row[k]) for k in header))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_scope

    report = run_scope(args.scope, seed=args.seed or 0, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} scope={args.scope} worst={report.worst:.3e} "
          f"tolerance={report.tolerance:.0e}")
    return 0 if report.passed else EXIT_CHECK


def _read_checkpoint(path):
    if not path or not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_analyze(args):
    cfg = resolve_config(args.config, args.set, vars(args))
    state = _read_checkpoint(args.checkpoint)
    spec = spec_from_state(state)
    dtype = state[next(k for k in state if k.startswith("param/"))].dtype
    net = build(spec, 0, dtype)
    load_state_dict(net, state)
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    if not net.bases():
        raise ConfigError(f"{spec.name} has no shared bases to analyze")
    epoch = int(state["meta/epoch"][0]) - 1
    if args.what == "simflow":
        analyze.network_similarity(net).write_csv(out / "similarity.csv")
        if args.batches:
            train_set, _ = load_datasets(cfg)
            rec = analyze.GradFlowRecorder(every_k=1)
            for i, (x, y) in enumerate(train_set.batches(cfg["train.batch_size"])):
                if i >= args.batches:
                    break
                net.zero_grad()
                net.loss_and_backward(x, y)
                if cfg["ortho.lambda"]:
                    net.add_ortho_grad(cfg["ortho.lambda"])
                rec.on_batch(i, net)
            rec.write_csv(out / "gradflow.csv")
    elif args.what == "spectral":
        write_spectral(net, out, cfg["analyze.spectral_n"], cfg["analyze.spectral_trials"],
                       derive_seed(cfg["train.seed"], "spectral"))
    else:
        tracker = analyze.DeviationTracker()
        tracker.snapshot(epoch, net)
        tracker.write_csv(out / "deviation.csv")
    print(f"wrote {args.what} analysis of {spec.name} (epoch {epoch}) to {out}")
    return 0


# --- parser -----------------------------------------------------------------------------------


def _common(p, training=True):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "mnist", "synthetic"])
    p.add_argument("--data-dir", dest="data_dir", help="dataset root (default: $OBN_DATA_DIR)")
    p.add_argument("--subset", type=int, help="class-balanced training subset size")
    p.add_argument("--test-subset", dest="test_subset", type=int)
    if training:
        p.add_argument("--model")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lambda", dest="lam", type=float, help="orthogonality penalty weight")
        p.add_argument("--dtype", choices=["float32", "float64"])
        p.add_argument("--gradflow-every", dest="gradflow_every", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="obn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test error of a checkpoint")
    _common(p, training=False)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="parameter and FLOP count")
    p.add_argument("target", help="model name or config file")
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--geometry", choices=["cifar", "imagenet"])
    p.add_argument("--csv-only", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("sweep", help="grid over shared (s) and unshared (u) element counts")
    _common(p)
    p.add_argument("--s-list", dest="s_list")
    p.add_argument("--u-list", dest="u_list")
    p.add_argument("--count-only", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=["layer", "block", "network"], default="layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help="include a deliberately wrong layer")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="analysis CSVs from a checkpoint")
    _common(p, training=False)
    p.add_argument("checkpoint")
    p.add_argument("--what", choices=["simflow", "spectral", "deviation"], required=True)
    p.add_argument("--batches", type=int, default=0, help="simflow: gradient-flow batches to record")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"obn: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as e:
        print(f"obn: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"obn: numerical abort: {e}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
