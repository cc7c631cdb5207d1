"""Command line entry point: ``hm2bp {train,eval,verify,encode-cache}``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical abort,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import verify as V
from .core import ConfigError, DataError, NumericalError, VerificationError
from .data import write_spike_cache
from .lif import MembraneTrace, dump_traces, forward_pass
from .train import build_datasets, build_network, evaluate, load_run_config, train
from .io import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3, 4

log = logging.getLogger("hm2bp")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("epochs", "seed", "workers", "data_dir", "checkpoint", "metrics_log",
                "train_n", "test_n"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = str(val)
    if getattr(args, "full_data", False):
        out["full_data"] = "true"
    if getattr(args, "verbose", False):
        out["verbose"] = "true"
    return out


def _write_trace_dump(path, net, dataset, grid, per_layer: int) -> None:
    fwd = forward_pass(net, dataset.raster(0), grid, record_traces=True, tables=False)
    with open(path, "w") as fh:
        for i in range(1, len(net.layers)):
            volts, spikes = fwd.traces[i], fwd.rasters[i]
            n = min(per_layer, volts.shape[1])
            fh.write(f"# layer {i} ({net.layers[i].kind}), first {n} neurons\n")
            traces = [MembraneTrace(volts[:, j], np.flatnonzero(spikes[:, j]).tolist())
                      for j in range(n)]
            dump_traces(traces, grid, fh)
    log.info("membrane traces of sample 0 written to %s", path)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    train_set, test_set = build_datasets(cfg)
    net = build_network(cfg)
    if args.trace_dump:
        _write_trace_dump(args.trace_dump, net, train_set, cfg.grid, args.trace_neurons)
    result = train(cfg, net, train_set, test_set)
    last = result.history[-1]
    print(json.dumps({"epochs": last["epoch"], "test_acc": last["test_acc"],
                      "checkpoint": result.checkpoint}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    net = build_network(cfg)
    net.weights = load_checkpoint(args.checkpoint, net)
    _, test_set = build_datasets(cfg)
    res = evaluate(net, test_set, cfg.grid)
    print(f"accuracy {res.accuracy:.4f} ({int(np.trace(res.confusion))}/{len(test_set)})")
    if args.confusion:
        print("confusion (rows = true class, columns = predicted):")
        for row in res.confusion:
            print(" ".join(f"{v:5d}" for v in row))
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(V.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        rep = V.SUITES[name]()
        print(rep.text())
        ok = ok and rep.passed
    if not ok:
        raise VerificationError("one or more checks failed")
    return EXIT_OK


def cmd_encode_cache(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    cfg.cache = ""
    train_set, test_set = build_datasets(cfg)
    ds = train_set if args.split == "train" else test_set
    n = write_spike_cache(args.output, ds)
    print(f"wrote {n} samples to {args.output}")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--data-dir", dest="data_dir",
                   help="dataset root (default: config value, or $HM2BP_DATA_DIR)")
    p.add_argument("--train-n", dest="train_n")
    p.add_argument("--test-n", dest="test_n")
    p.add_argument("--full-data", action="store_true", help="ignore subset limits")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hm2bp", description="Train and evaluate spiking networks "
                                 "by backpropagating firing-count errors.")
    ap.add_argument("-v", "--verbose", action="store_true",
                    help="debug logging, including per-batch gradient norms")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a run config")
    p.add_argument("config")
    _add_run_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--metrics-log", dest="metrics_log")
    p.add_argument("--trace-dump", metavar="PATH",
                   help="write membrane traces of the first training sample before training")
    p.add_argument("--trace-neurons", type=int, default=10, help="neurons per layer in the dump")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("config")
    p.add_argument("checkpoint")
    _add_run_flags(p)
    p.add_argument("--confusion", action="store_true", help="print per-class counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run an oracle suite")
    p.add_argument("suite", choices=list(V.SUITES) + ["all"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("encode-cache", help="pre-encode a split into a spike cache file")
    p.add_argument("config")
    p.add_argument("output")
    p.add_argument("--split", choices=("train", "test"), default="train")
    _add_run_flags(p)
    p.set_defaults(func=cmd_encode_cache)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except VerificationError as exc:
        log.error("verification failed: %s", exc)
        return EXIT_VERIFY
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
