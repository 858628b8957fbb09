"""Command-line harness.

Subcommands: generate, train, eval, forgetting, print-config, selftest.
Exit codes: 0 ok, 1 usage/IO error, 2 numerical failure.  The environment
variable BEVLAB_OUT_DIR overrides the output directory (and nothing else).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import audit
from .config import ExperimentConfig
from .errors import ConfigurationError, DomainError, GenerationError, NumericalError, TrainingError

_USAGE_ERRORS = (
    ConfigurationError,
    DomainError,
    GenerationError,
    FileNotFoundError,
    NotADirectoryError,
)
_NUMERIC_ERRORS = (TrainingError, NumericalError)


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    return ExperimentConfig.from_json(Path(path).read_text())


def _out_dir(args) -> Path:
    env = os.environ.get("BEVLAB_OUT_DIR")
    if env:
        return Path(env)
    return Path(args.out)


def cmd_generate(args) -> int:
    from .runner import generate_datasets

    config = _load_config(args.config)
    out = _out_dir(args)
    train, test = generate_datasets(config, out)
    print(f"dataset written to {out} ({len(train)} train scenes, {len(test)} test scenes)")
    print(f"labeled {len(train.labeled)} / unlabeled {len(train.unlabeled)}")
    return 0


def cmd_train(args) -> int:
    from .runner import run_training

    config = _load_config(args.config)
    if args.audit:
        audit.reset()
        with audit.auditing():
            summary = run_training(config, args.dataset, _out_dir(args), args.mode)
        (_out_dir(args) / "audit.json").write_text(
            json.dumps(audit.counters(), indent=2, sort_keys=True)
        )
    else:
        summary = run_training(config, args.dataset, _out_dir(args), args.mode)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .runner import run_eval

    report = run_eval(args.checkpoint, args.dataset, args.split, args.report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_forgetting(args) -> int:
    from .runner import run_forgetting

    report = run_forgetting(args.supervised, args.semi, args.dataset, args.report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_print_config(args) -> int:
    config = _load_config(args.config)
    print(config.to_json())
    return 0


def cmd_selftest(args) -> int:
    ok = run_selftest(verbose=True)
    return 0 if ok else 2


def run_selftest(verbose: bool = False) -> bool:
    """Fast oracle suite: gradients, moment matching, IoU, NMS, EMA, noise law."""
    import numpy as np

    from .gradcheck import gradient_check
    from .geometry import Box, Detection, iou_bev, nms
    from .fusion import moment_align
    from .params import ParamStore
    from .teacher import ema_update
    from .tensor import Tensor, conv2d, sigmoid, tsum

    checks = []

    def check(name, passed):
        checks.append(passed)
        if verbose:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}")

    p = ParamStore()
    rng = np.random.default_rng(0)
    p.add("w", rng.normal(size=(3, 2, 3, 3)))
    p.add("b", rng.normal(size=3))
    x = rng.normal(size=(2, 6, 6))
    rep = gradient_check(
        lambda ps: tsum(sigmoid(conv2d(Tensor(x), ps["w"], ps["b"], padding=1))), p
    )
    check("conv2d+sigmoid gradient vs finite differences", rep.passed)

    cam = Tensor(rng.normal(2.0, 3.0, size=(4, 8, 8)))
    lid = Tensor(rng.normal(-1.0, 0.5, size=(4, 8, 8)))
    out = moment_align(cam, lid)
    mu_err = np.abs(out.data.mean(axis=(1, 2)) - lid.data.mean(axis=(1, 2))).max()
    sd_err = np.abs(out.data.std(axis=(1, 2)) - lid.data.std(axis=(1, 2))).max()
    check("moment matching (mean 1e-9, std 1e-6)", mu_err <= 1e-9 and sd_err <= 1e-6)

    a = Box(0, 0, 2, 2, 0.0)
    b = Box(1, 0, 2, 2, 0.0)
    check("rotated IoU hand case 2/6", abs(iou_bev(a, b) - 1.0 / 3.0) < 1e-12)

    dets = [Detection(Box(0, 0, 2, 2, 0.0), 0, 0.9), Detection(Box(0, 0, 2, 2, 0.0), 0, 0.8)]
    check("NMS keeps the higher-scoring duplicate", len(nms(dets, 0.5)) == 1 and nms(dets, 0.5)[0].score == 0.9)

    prev = ParamStore()
    prev.add("w", np.ones(4))
    stud = ParamStore()
    stud.add("w", np.zeros(4))
    check("EMA endpoint alpha=0.9 -> 0.9", np.allclose(ema_update(prev, stud, 0.9)["w"].data, 0.9))

    s, i = 0.64, 0.81
    u = 1.0 - (s * i) ** 0.5
    check("uncertainty law beta=0 hand value", abs(u - 0.28) < 1e-12)

    return all(checks)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevlab",
        description="Desk-scale semi-supervised BEV detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate train/test datasets")
    g.add_argument("--config", default=None, help="config JSON path (defaults used otherwise)")
    g.add_argument("--out", default="data", help="dataset output directory")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train supervised or semi-supervised")
    t.add_argument("--config", default=None)
    t.add_argument("--dataset", required=True, help="dataset root (from generate)")
    t.add_argument("--mode", choices=("supervised", "semi"), default="supervised")
    t.add_argument("--out", default="runs/run0", help="run output directory")
    t.add_argument("--audit", action="store_true", help="dump op-call counters")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "test", "labeled", "unlabeled"), default="test")
    e.add_argument("--report", default=None, help="optional JSON report path")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("forgetting", help="delta-percent between two checkpoints")
    f.add_argument("--supervised", required=True, help="supervised checkpoint dir")
    f.add_argument("--semi", required=True, help="semi-supervised checkpoint dir")
    f.add_argument("--dataset", required=True)
    f.add_argument("--report", default=None)
    f.set_defaults(fn=cmd_forgetting)

    p = sub.add_parser("print-config", help="print the fully resolved config")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_print_config)

    s = sub.add_parser("selftest", help="run the fast oracle suite")
    s.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
