"""``qlower`` command-line front end.

Every subcommand reads manifests and blobs, applies one step of the pipeline
and writes its result; nothing depends on wall-clock time or global RNG state.
Exit status is 0 on success, 1 when ``compare`` finds a failing report and 2
on any error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import graph as graph_io
from .errors import QlowerError
from .graph import ID
from .interpreter import integer_input, run
from .lowering import integerize, lower
from .pact import calibrate, to_fakequantized
from .requant import DEFAULT_ACT_FACTOR, DEFAULT_ADD_FACTOR
from .tensor import INTEGER, as_real, kind_of, read_blob
from .train import read_blobs, read_dataset, train

log = logging.getLogger("qlower")


def _manifest(path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.suffix != ".json" else path


def _load(path):
    return graph_io.load(_manifest(path))


def _save(g, path) -> Path:
    out = graph_io.save(g, _manifest(path))
    print(f"wrote {out} ({g.representation.value})")
    return out


def _inputs(path) -> list[np.ndarray]:
    path = Path(path)
    xs = [read_blob(path)] if path.is_file() else read_blobs(path)
    if not xs:
        raise QlowerError(f"no input blobs under {path}")
    return xs


def cmd_calibrate(a) -> int:
    g = calibrate(_load(a.model), _inputs(a.data))
    _save(g, a.out)
    return 0


def cmd_quantize(a) -> int:
    _save(to_fakequantized(_load(a.model), a.bits_a, a.bits_w), a.out)
    return 0


def cmd_lower(a) -> int:
    g = lower(_load(a.model), a.bn_strategy, a.bits_bn, a.eps_in)
    _save(g, a.out)
    return 0


def cmd_integerize(a) -> int:
    g = integerize(_load(a.model), None, a.rqf_act, a.rqf_add)
    _save(g, a.out)
    return 0


def cmd_run(a) -> int:
    g = _load(a.model)
    x = _inputs(a.data)[0]
    if g.representation == ID and kind_of(x) != INTEGER:
        x = integer_input(g, x)
    out, trace = run(g, x)
    with np.printoptions(threshold=64, linewidth=100):
        print(out)
    print(f"representation={g.representation.value} integer_ops={trace.integer_ops} "
          f"real_ops={trace.real_ops}")
    return 0


def cmd_compare(a) -> int:
    from .plotting import plot_report
    from .verify import compare_representations

    if len(a.model) != 2:
        raise QlowerError("compare needs --model twice (reference first)")
    g_a, g_b = _load(a.model[0]), _load(a.model[1])
    xs = [as_real(x) for x in _inputs(a.data)]
    report = compare_representations(g_a, g_b, xs)
    print(report.to_text())
    if a.report:
        written = report.write(a.report)
        written.append(plot_report(report, Path(a.report).with_suffix(".png")))
        for p in written:
            print(f"wrote {p}")
    return 0 if report.passed else 1


def cmd_train(a) -> int:
    from .plotting import plot_training

    xs, labels = read_dataset(a.data)
    g, history = train(_load(a.model), xs, labels, epochs=a.epochs, lr=a.lr,
                       batch=a.batch, seed=a.seed)
    for h in history:
        if h.epoch == 1 or h.epoch % 20 == 0 or h.epoch == len(history):
            print(f"epoch {h.epoch:4d}  loss {h.loss:.4f}  accuracy {h.accuracy:.3f}")
    _save(g, a.out)
    if a.report:
        path = Path(a.report).with_suffix(".csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss", "accuracy"])
            for h in history:
                w.writerow([h.epoch, repr(h.loss), repr(h.accuracy)])
        png = plot_training(history, path.with_suffix(".png"))
        print(f"wrote {path}\nwrote {png}")
    return 0


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", action="append", required=True,
                        help="manifest (or directory holding manifest.json)")
    common.add_argument("--out", help="output manifest path or directory")
    common.add_argument("--data", help="input blob or directory of blobs")
    common.add_argument("--bits-a", type=int, default=8)
    common.add_argument("--bits-w", type=int, default=8)
    common.add_argument("--bits-bn", type=int, default=8)
    common.add_argument("--eps-in", type=float, default=1.0 / 255)
    common.add_argument("--rqf-act", type=int, default=DEFAULT_ACT_FACTOR)
    common.add_argument("--rqf-add", type=int, default=DEFAULT_ADD_FACTOR)
    common.add_argument("--bn-strategy", choices=("fold", "integer", "thresholds"),
                        default="integer")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--report", help="report path; sibling .csv/.png are written too")

    ap = argparse.ArgumentParser(prog="qlower", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    specs = {
        "calibrate": (cmd_calibrate, "set clip bounds from data (FullPrecision)", ("out", "data")),
        "quantize": (cmd_quantize, "FullPrecision -> FakeQuantized", ("out",)),
        "lower": (cmd_lower, "FakeQuantized -> QuantizedDeployable", ("out",)),
        "integerize": (cmd_integerize, "QuantizedDeployable -> IntegerDeployable", ("out",)),
        "run": (cmd_run, "execute a graph on one input blob", ("data",)),
        "compare": (cmd_compare, "check two representations node by node", ("data",)),
        "train": (cmd_train, "quantization-aware training of an MLP", ("out", "data")),
    }
    for name, (fn, help_, required) in specs.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn, required=required)
        if name == "train":
            p.add_argument("--epochs", type=int, default=200)
            p.add_argument("--lr", type=float, default=0.5)
            p.add_argument("--batch", type=int, default=32)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("QLOWER_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = _parser()
    args = ap.parse_args(argv)
    for key in args.required:
        if getattr(args, key) is None:
            ap.error(f"{args.command} requires --{key}")
    if args.command != "compare" and len(args.model) != 1:
        ap.error(f"{args.command} takes one --model")
    if args.command != "compare":
        args.model = args.model[0]
    try:
        return args.func(args)
    except (QlowerError, OSError, ValueError) as e:
        print(f"qlower {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
