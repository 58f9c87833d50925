"""Command-line entry point: ``weightalign {train,analyze,verify,sweep,ablate}``.

Every command reads a JSON experiment config (``--config``), lets flags
override it, and writes artifacts to ``--out``.  Artifacts embed the fully
resolved config; wall-clock data goes to ``metadata.json`` only, so re-running
with the same config reproduces every other file byte for byte.

Exit codes: 0 success, 1 config or usage error, 2 training diverged.
"""

import argparse
import copy
import csv
import io
import json
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data import load_cifar10, load_mnist, synthetic_classification
from .layers import (NetworkSpec, apply_variant, build_network, drift_net_spec,
                     desk_cnn_spec, parse_variant, small_cnn_spec, small_resnet_spec)
from .normalize import ConfigError
from .statlab import (DEFAULT_SAMPLES, DRIFT_CHANNELS, DRIFT_LAYER, channel_alignment,
                      default_suite, drift_trial)
from .tensor import ShapeError
from .train import TrainConfig, ablate_scale, sweep_batch, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

PRESETS = {"small_cnn": small_cnn_spec, "desk_cnn": desk_cnn_spec, "drift": drift_net_spec, "small_resnet": small_resnet_spec}
DATASETS = ("mnist", "cifar10", "synthetic")
TOP_KEYS = {"network", "dataset", "train", "variant", "norm", "reparam", "seed", "sweep",
            "ablate", "analyze", "verify"}

DEFAULTS = {
    "network": {"preset": "small_cnn"},
    "dataset": {"name": "synthetic"},
    "train": {},
    "variant": "baseline",
    "norm": {},
    "reparam": {},
    "seed": 0,
    "sweep": {"methods": ["bn", "wa"], "batch_sizes": [64, 8, 2]},
    "ablate": {"multipliers": [0.2, 1, 2, 4]},
    "analyze": {"variants": ["baseline", "wa"], "batch": 128, "layers": [DRIFT_LAYER],
                "channels": list(DRIFT_CHANNELS)},
    "verify": {"samples": DEFAULT_SAMPLES, "controls": True},
}


# -- config resolution ------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    user = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(user) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    if "network" in user:
        # a network is either a preset or a full layer list, never a mix
        cfg["network"] = copy.deepcopy(user["network"])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.dataset_root is not None:
        cfg["dataset"]["root"] = str(args.dataset_root)
    net = cfg["network"]
    if isinstance(net, str):
        path = Path(net)
        if not path.is_file():
            raise ConfigError(f"network spec file {path} does not exist")
        cfg["network"] = net = json.loads(path.read_text())
    if "layers" not in net and net.get("preset") not in PRESETS:
        raise ConfigError(f"network preset must be one of {sorted(PRESETS)}")
    if cfg["dataset"].get("name") not in DATASETS:
        raise ConfigError(f"dataset name must be one of {list(DATASETS)}")
    parse_variant(cfg["variant"])
    cfg["train"].setdefault("seed", cfg["seed"])
    TrainConfig.from_dict(cfg["train"])
    return cfg


def network_spec(cfg, variant=None, seed=None):
    net = cfg["network"]
    seed = cfg["seed"] if seed is None else seed
    if "layers" in net:
        spec = NetworkSpec.from_dict(dict(net, seed=seed))
    else:
        kwargs = dict(net.get("kwargs", {}))
        for k in ("input_shape", "widths", "pool_after", "strides"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        spec = PRESETS[net["preset"]](seed=seed, **kwargs)
    variant = cfg["variant"] if variant is None else variant
    if variant != "baseline" or cfg["norm"] or cfg["reparam"]:
        spec = apply_variant(spec, variant, cfg["norm"] or None, cfg["reparam"] or None)
    return spec


def load_data(cfg):
    d = cfg["dataset"]
    name = d["name"]
    if name == "synthetic":
        kw = {k: d[k] for k in ("num_classes", "noise") if k in d}
        shape = tuple(d.get("shape", (1, 8, 8)))
        seed = d.get("seed", 0)
        tr = synthetic_classification(d.get("train_subset", 512), shape, seed=seed, split="train", **kw)
        te = synthetic_classification(d.get("test_subset", 256), shape, seed=seed, split="test", **kw)
        return tr, te
    loader = load_mnist if name == "mnist" else load_cifar10
    try:
        return loader(d.get("root"), d.get("train_subset"), d.get("test_subset"))
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file missing: {exc}") from None


# -- artifact writing ---------------------------------------------------------------

def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class Artifacts:
    def __init__(self, out, command, cfg):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = datetime.now(timezone.utc).isoformat()
        self.t0 = time.perf_counter()
        self.command = command
        self.cfg = cfg
        self.timing = {}
        self.write("config.json", _dump({"command": command, "config": cfg, "version": __version__}))

    def write(self, name, text):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def finish(self, exit_code):
        self.write("metadata.json", _dump({
            "command": self.command, "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "wall_time": time.perf_counter() - self.t0, "exit_code": exit_code,
            "timing": self.timing,
        }))
        return exit_code


def _fmt(x):
    return "" if x is None else repr(x) if isinstance(x, float) else str(x)


EPOCH_COLUMNS = ("epoch", "lr", "train_loss", "train_error", "test_error", "test_loss")
ARM_COLUMNS = ("method", "batch_size", "multiplier", "final_test_error", "diverged", "skipped", "note")


def _write_run(art, rec, stem):
    art.write(f"{stem}.jsonl", "".join(line + "\n" for line in rec.jsonl_lines()))
    art.write(f"{stem}.json", rec.to_json(timing=False) + "\n")
    rows = [[_fmt(e[c]) for c in EPOCH_COLUMNS] for e in rec.epochs]
    art.write(f"{stem}_summary.csv", _csv(EPOCH_COLUMNS, rows))
    art.timing[stem] = rec.wall_time


def _arm_row(rec, method):
    lab = rec.label
    note = rec.skip_reason or rec.divergence_reason or ""
    return [method, _fmt(lab.get("batch_size", rec.config["batch_size"])), _fmt(lab.get("multiplier", 1.0)),
            _fmt(rec.final_test_error), str(rec.diverged).lower(), str(rec.skipped).lower(), note]


# -- commands -------------------------------------------------------------------------

def cmd_train(cfg, args):
    """Train one network."""
    spec = network_spec(cfg)
    net = build_network(spec)
    tr, te = load_data(cfg)
    art = Artifacts(args.out, "train", cfg)
    rec = train(net, tr, te, TrainConfig.from_dict(cfg["train"]), {"method": cfg["variant"]})
    _write_run(art, rec, "run")
    final = rec.final_test_error
    print(f"train {cfg['variant']}: {len(rec.epochs)} epoch(s), final test error "
          f"{'n/a' if final is None else f'{final:.2f}%'}" + (", DIVERGED" if rec.diverged else ""))
    return art.finish(EXIT_DIVERGED if rec.diverged else EXIT_OK)


def cmd_analyze(cfg, args):
    """Activation statistics of untrained networks."""
    a = cfg["analyze"]
    variants = a["variants"]
    if not variants:
        raise ConfigError("analyze needs at least one variant")
    for v in variants:
        parse_variant(v)
    seeds = a.get("seeds", [cfg["seed"]])
    net = cfg["network"]
    net_kwargs = dict(net.get("kwargs", {})) if net.get("preset") == "drift" else {}
    if "input_shape" in net_kwargs:
        net_kwargs["input_shape"] = tuple(net_kwargs["input_shape"])
    art = Artifacts(args.out, "analyze", cfg)
    rows = []
    for v in variants:
        for s in seeds:
            rep = drift_trial(v, s, a["batch"], net_kwargs, a["layers"][0], a["channels"])
            rep.metadata["config"] = cfg
            stem = f"analyze/{v.replace('+', '_')}_seed{s}"
            art.write(f"{stem}.json", rep.to_json() + "\n")
            art.write(f"{stem}.csv", rep.to_csv())
            aligned = channel_alignment(rep, layer=a["layers"][0])
            rows.append([v, s, repr(rep.argmax_constancy), str(aligned).lower()])
            print(f"analyze {v} seed {s}: argmax constancy {rep.argmax_constancy:.3f}, "
                  f"channels aligned: {aligned}")
    art.write("analyze.csv", _csv(("variant", "seed", "argmax_constancy", "aligned"), rows))
    return art.finish(EXIT_OK)


def cmd_verify(cfg, args):
    """Monte-Carlo checks of the moment identities."""
    v = cfg["verify"]
    samples = int(v["samples"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = default_suite(samples, cfg["seed"], v.get("controls", True))
    for w in {str(c.message) for c in caught}:
        print(f"warning: {w}", file=sys.stderr)
    art = Artifacts(args.out, "verify", cfg)
    header = ("check", "estimate", "target", "stderr", "samples", "passed", "control")
    rows = [[r.name, repr(r.estimate), repr(r.target), repr(r.stderr), r.samples,
             str(r.passed).lower(), str(r.control).lower()] for r in results]
    art.write("verify.csv", _csv(header, rows))
    art.write("verify.json", _dump({"config": cfg, "results": [r.to_dict() for r in results]}))
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        tag = " (control, expected to fail)" if r.control else ""
        print(f"{status}  {r.name}: {r.estimate:.6g} vs {r.target:.6g}{tag}")
    gated = [r for r in results if not r.control]
    return art.finish(EXIT_OK if all(r.passed for r in gated) else EXIT_CONFIG)


def _arms_out(art, name, recs, methods):
    rows = []
    for rec, method in zip(recs, methods):
        lab = rec.label
        stem = f"arms/{method.replace('+', '_')}_bs{lab.get('batch_size', rec.config['batch_size'])}"
        if "multiplier" in lab:
            stem += f"_x{lab['multiplier']:g}"
        _write_run(art, rec, stem)
        rows.append(_arm_row(rec, method))
        print(" ".join(f"{c}={v}" for c, v in zip(ARM_COLUMNS, rows[-1]) if v != ""))
    art.write(f"{name}.csv", _csv(ARM_COLUMNS, rows))


def cmd_sweep(cfg, args):
    """Batch-size sweep over normalization methods."""
    s = cfg["sweep"]
    methods, sizes = s["methods"], s["batch_sizes"]
    if not methods or not sizes:
        raise ConfigError("sweep needs at least one method and one batch size")
    tr, te = load_data(cfg)
    tcfg = TrainConfig.from_dict(cfg["train"])
    art = Artifacts(args.out, "sweep", cfg)
    recs, labels = [], []
    for m in methods:
        out = sweep_batch(network_spec(cfg, m), tr, te, sizes, tcfg, {"method": m}, args.jobs)
        recs += out
        labels += [m] * len(out)
    _arms_out(art, "sweep", recs, labels)
    return art.finish(EXIT_OK)


def cmd_ablate(cfg, args):
    """WeightAlign scale-factor ablation."""
    mults = cfg["ablate"]["multipliers"]
    if not mults:
        raise ConfigError("ablate needs at least one multiplier")
    variant = cfg["variant"] if "wa" in cfg["variant"] else "wa"
    spec = network_spec(cfg, variant)
    tr, te = load_data(cfg)
    art = Artifacts(args.out, "ablate", cfg)
    recs = ablate_scale(spec, tr, te, mults, TrainConfig.from_dict(cfg["train"]), {"method": variant},
                        args.jobs)
    _arms_out(art, "ablate", recs, [variant] * len(recs))
    return art.finish(EXIT_OK)


COMMANDS = {"train": cmd_train, "analyze": cmd_analyze, "verify": cmd_verify,
            "sweep": cmd_sweep, "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(prog="weightalign", description="WeightAlign experiments.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel arms for sweep/ablate")
    common.add_argument("--dataset-root", type=Path, help="dataset directory (default $DATA_ROOT or ./data)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__.rstrip(".").lower())
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ShapeError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
