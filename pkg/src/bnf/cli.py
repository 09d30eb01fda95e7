"""``bnf`` command line: train, eval, cost, decompose.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All files go under the
output root (``--out-root``, overridden by ``$BNF_OUT_DIR``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bitplane import FixedTensor, decompose, recompose
from .checkpoint import load_checkpoint, save_checkpoint
from .container import ContainerError, read_tensor, write_tensor
from .cost import FirstLayerDims, GateCostTable, cost_table, format_table
from .data import (Dataset, SynthSpec, generate_synthetic, load_container_dataset, load_column_map,
                   load_with_config, window, windows_to_fixed)
from .dsl import MODES, PRESET_STRINGS, ArchitectureError, Conv, ModelConfig, parse_architecture, preset
from .train import TrainConfig, TrainingError, evaluate, run_loso, train

log = logging.getLogger("bnf")

USAGE, FAILURE = 1, 2
DEFAULT_OUT_ROOT = "bnf_runs"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE, f"{self.prog}: error: {message}\n")


def out_root(args) -> Path:
    return Path(os.environ.get("BNF_OUT_DIR") or args.out_root)


def run_dir(args, default_name: str) -> Path:
    name = args.name or default_name
    if Path(name).is_absolute() or ".." in Path(name).parts:
        raise UsageError(f"run name {name!r} must stay inside the output root")
    return out_root(args) / name


# -- model / data resolution --------------------------------------------------

def model_from_args(a: dict) -> ModelConfig:
    mode = a["mode"]
    K = a.get("K")
    if mode == "bil" and K is None:
        raise UsageError("K required for bil")
    if mode != "bil" and K is not None:
        raise UsageError(f"--K only applies to --mode bil, not {mode}")
    try:
        if a.get("preset"):
            return preset(a["preset"], mode=mode, K=K, M=a["M"])
        if not a.get("arch"):
            raise UsageError("give --preset or --arch")
        if not a.get("input_shape"):
            raise UsageError("--arch needs --input-shape H,W,C")
        return ModelConfig(parse_architecture(a["arch"]), mode, K, a["M"], tuple(a["input_shape"]),
                           a.get("axis") or "full_2d", a.get("classes") or 2, arch=a["arch"])
    except (ArchitectureError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(str(exc)) from exc


def load_data(a: dict, model: ModelConfig, role: str = "train") -> Dataset:
    """Resolve ``--data``: ``synth:KIND``, ``csv:PATH`` or ``bnt:X,Y[,SUBJECTS]``."""
    spec = a["data"]
    kind, _, rest = spec.partition(":")
    h, w, c = model.input_shape
    if kind == "synth":
        seed = a.get("data_seed", 0) + (1000 if role == "val" else 0)
        n = a.get("samples_per_class", 256)
        if role == "val":
            n = max(n // 4, 1)
        try:
            s = SynthSpec(rest, M=model.M, channels=c, samples_per_class=n, seed=seed, height=h, length=w)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        ds = generate_synthetic(s)
        ds.num_classes = model.num_classes
        return ds
    if kind == "csv":
        if not a.get("columns"):
            raise UsageError("csv data needs --columns JSON")
        cmap = load_column_map(a["columns"])
        ts = load_with_config(rest, cmap)
        win = window(ts, a.get("window") or w, a.get("stride"))
        ranges = [cmap["ranges"][name] for name in ts.channel_names] if "ranges" in cmap else \
            list(zip(ts.values.min(axis=0), ts.values.max(axis=0) + 1e-9))
        return windows_to_fixed(win, model.M, ranges, model.num_classes)
    if kind == "bnt":
        paths = rest.split(",")
        if len(paths) not in (2, 3):
            raise UsageError("bnt data is bnt:X_PATH,Y_PATH[,SUBJECTS_PATH]")
        return load_container_dataset(*paths, num_classes=model.num_classes)
    raise UsageError(f"unknown data source {spec!r}")


def split_val(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    if fraction <= 0:
        return ds, None
    order = np.random.default_rng([seed, 7]).permutation(len(ds))
    n_val = max(1, int(round(len(ds) * fraction)))
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def _schedule(text: str):
    if not text:
        return ()
    out = []
    for part in text.split(","):
        e, _, m = part.partition(":")
        out.append((int(e), float(m)))
    return tuple(out)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        a = dict(manifest["config"])
        if args.name:
            a["name"] = args.name
    else:
        a = {k: v for k, v in vars(args).items() if k not in ("func", "from_manifest", "out_root")}
    model = model_from_args(a)
    try:
        tcfg = TrainConfig(epochs=a["epochs"], lr=a["lr"], lr_schedule=_schedule(a["lr_schedule"]),
                           batch_size=a["batch_size"], seed=a["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    args.name = a.get("name")
    out = run_dir(args, f"{model.first_layer_mode}_seed{a['seed']}")
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(a, model)
    start = time.time()
    results: dict = {}
    if a.get("loso"):
        summary = run_loso(model, data, tcfg)
        results = {"loso": summary, "final_val_error": summary["mean_final"],
                   "best_val_error": summary["mean_best"]}
        checkpoints = []
    else:
        if a["data"].startswith("synth:"):
            tr, va = data, load_data(a, model, role="val")
        else:
            tr, va = split_val(data, a["val_fraction"], a["seed"])
        res = train(model, tr, tcfg, val=va, metrics_path=out / "metrics.csv",
                    progress=(lambda m: log.info("epoch %d train %.2f%% val %s", m.epoch, m.train_error,
                                                 "-" if m.val_error is None else f"{m.val_error:.2f}%")))
        save_checkpoint(res.network, out / "checkpoint")
        checkpoints = ["checkpoint"]
        results = {"final_train_error": res.final_train_error, "final_val_error": res.final_val_error,
                   "best_val_error": res.best_val_error}
    manifest = {
        "config": a,
        "model": model.to_dict(),
        "train": {"epochs": tcfg.epochs, "lr": tcfg.lr, "lr_schedule": [list(s) for s in tcfg.lr_schedule],
                  "batch_size": tcfg.batch_size, "betas": [tcfg.beta1, tcfg.beta2], "eps": tcfg.eps},
        "seed": a["seed"],
        "code_version": __version__,
        "metrics": None if a.get("loso") else "metrics.csv",
        "checkpoints": checkpoints,
        "wall_clock_s": round(time.time() - start, 3),
        "results": results,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    fmt = lambda v: "n/a" if v is None else f"{v:.2f}%"  # noqa: E731
    print(f"run: {out}")
    print(f"final validation error: {fmt(results.get('final_val_error'))}")
    print(f"best validation error: {fmt(results.get('best_val_error'))}")
    return 0


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    return str(o)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if (ckpt / "manifest.json").exists():
        ckpt = ckpt / "checkpoint"
    net = load_checkpoint(ckpt)
    a = {"data": args.data, "data_seed": args.data_seed, "samples_per_class": args.samples_per_class,
         "columns": args.columns, "window": args.window, "stride": args.stride}
    data = load_data(a, net.cfg)
    if len(data) == 0:
        raise UsageError("evaluation set is empty")
    err, loss = evaluate(net, data, packed=args.packed)
    print(f"error: {err:.2f}% ({len(data)} samples, loss {loss:.4f})")
    return 0


def _dims_from_args(args) -> FirstLayerDims:
    if args.preset:
        cfg = preset(args.preset, M=args.M or 8)
        first = next(layer for layer in cfg.layers if isinstance(layer, Conv))
        kernel = cfg.kernel(first.size)
        h, w, c = cfg.input_shape
        return FirstLayerDims(h, w, c, args.M or 8, kernel[0] * kernel[1], first.filters, args.K, kernel)
    missing = [f for f in ("H", "W", "C", "I", "M") if getattr(args, f) is None]
    if args.F is None and args.F_elems is None:
        missing.append("F")
    if missing:
        raise UsageError("missing dims: " + ", ".join("--" + m for m in missing) + " (or use --preset)")
    f_elems = args.F_elems if args.F_elems is not None else args.F * args.F
    return FirstLayerDims(args.H, args.W, args.C, args.M, f_elems, args.I, args.K)


def cmd_cost(args) -> int:
    try:
        dims = _dims_from_args(args)
        gates = GateCostTable(gates_float_mult=args.float_gates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    reports = cost_table(dims, gates)
    text = format_table(reports, args.format)
    sys.stdout.write(text)
    if args.save:
        out = run_dir(args, "cost")
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.csv").write_text(format_table(reports, "csv"))
    return 0


def cmd_decompose(args) -> int:
    try:
        t = read_tensor(args.input)
    except (ContainerError, OSError) as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from exc
    if not isinstance(t, FixedTensor):
        raise UsageError(f"{args.input} is not a fixed-point tensor")
    if args.M is not None and args.M != t.bit_width:
        raise UsageError(f"--M {args.M} does not match file header M={t.bit_width}")
    planes = decompose(t)
    out = run_dir(args, "decompose")
    out.mkdir(parents=True, exist_ok=True)
    target = out / (args.output or (Path(args.input).stem + "_planes.bnt"))
    if target.resolve().parent != out.resolve():
        raise UsageError("--output must be a file name inside the output directory")
    write_tensor(target, planes)
    print(f"planes: {planes.n_planes} (C={t.shape[-1]} x M={t.bit_width})")
    print(f"wrote {target}")
    if args.roundtrip:
        back = recompose(read_tensor(target))
        ok = back.bit_width == t.bit_width and np.array_equal(back.values, t.values)
        print("roundtrip: " + ("PASS" if ok else "FAIL"))
        return 0 if ok else FAILURE
    return 0


# -- parser -------------------------------------------------------------------------

def _shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("shape must be H,W,C")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bnf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out-root", default=DEFAULT_OUT_ROOT, help="output root (env BNF_OUT_DIR wins)")
        sp.add_argument("--name", help="run directory name under the output root")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data_flags(sp, required=True):
        sp.add_argument("--data", required=required, help="synth:KIND | csv:PATH | bnt:X,Y[,SUBJECTS]")
        sp.add_argument("--data-seed", type=int, default=0)
        sp.add_argument("--samples-per-class", type=int, default=256)
        sp.add_argument("--columns", help="JSON column map for csv data")
        sp.add_argument("--window", type=int, help="window length in samples (default: model width)")
        sp.add_argument("--stride", type=int, help="window stride (default: window length)")

    t = sub.add_parser("train", help="train a model")
    common(t)
    g = t.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(PRESET_STRINGS))
    g.add_argument("--arch", help="architecture string, e.g. 16-C3+FC32+Softmax")
    g.add_argument("--from-manifest", help="rerun the configuration stored in a manifest.json")
    t.add_argument("--input-shape", type=_shape, help="H,W,C for --arch")
    t.add_argument("--axis", choices=("full_2d", "time_only"))
    t.add_argument("--classes", type=int)
    t.add_argument("--mode", choices=MODES, default="baseline")
    t.add_argument("--K", type=int)
    t.add_argument("--M", type=int, default=8)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-schedule", default="100:0.1,150:0.1", help="EPOCH:MULT,... (empty for constant)")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--loso", action="store_true", help="leave-one-subject-out over dataset subjects")
    data_flags(t, required=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="error rate of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    e.add_argument("--packed", action="store_true", help="use the packed popcount kernels")
    data_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="first-layer multiplications, weights and relative area")
    common(c)
    c.add_argument("--preset", choices=sorted(PRESET_STRINGS))
    for f in ("H", "W", "C", "F", "I", "M", "K"):
        c.add_argument(f"--{f}", type=int)
    c.add_argument("--F-elems", dest="F_elems", type=int, help="kernel element count (overrides F*F)")
    c.add_argument("--float-gates", type=float, default=GateCostTable().gates_float_mult)
    c.add_argument("--format", choices=("text", "csv"), default="text")
    c.add_argument("--save", action="store_true", help="also write cost.csv to the output directory")
    c.set_defaults(func=cmd_cost)

    d = sub.add_parser("decompose", help="write the bit planes of a fixed-point container")
    common(d)
    d.add_argument("--input", required=True)
    d.add_argument("--output", help="output file name")
    d.add_argument("--M", type=int, help="expected bit width")
    d.add_argument("--roundtrip", action="store_true")
    d.set_defaults(func=cmd_decompose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.from_manifest:
        if not (args.preset or args.arch):
            parser.error("train needs --preset, --arch or --from-manifest")
        if not args.data:
            parser.error("train needs --data")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bnf: error: {exc}", file=sys.stderr)
        return USAGE
    except (TrainingError, ValueError, OSError, ContainerError) as exc:
        print(f"bnf: failed: {exc}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
