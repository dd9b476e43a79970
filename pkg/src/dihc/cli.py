"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``gradcheck``, ``report``.

Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import gradcheck as GC
from . import metrics as MT
from . import report as RP
from . import trainer as TR
from .network import ConfigurationError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_TOKENS = ("imd", "ms", "dihc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_ablation(spec: str) -> dict:
    """``full`` / ``none`` / comma list of enabled components out of imd, ms, dihc."""
    spec = spec.strip().lower()
    if spec in ("full", "all"):
        on = set(ABLATION_TOKENS)
    elif spec in ("none", ""):
        on = set()
    else:
        on = {t.strip() for t in spec.split(",") if t.strip()}
        bad = on - set(ABLATION_TOKENS)
        if bad:
            raise UsageError(f"unknown ablation component(s): {', '.join(sorted(bad))}")
    return {f"enable_{t}": t in on for t in ABLATION_TOKENS}


def thread_count() -> int | None:
    raw = os.environ.get("DIHC_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DIHC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DIHC_THREADS must be a positive integer, got {raw!r}")
    return n


def _limit_threads(n: int | None):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str
    threads: int | None
    outputs: dict = field(default_factory=dict)
    data: str = ""
    eval_data: str = ""
    resumed_from: str = ""
    python: str = field(default_factory=platform.python_version)
    numpy: str = field(default_factory=lambda: np.__version__)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    if args.shape <= 0 or args.shape % 8:
        raise UsageError(f"--shape must be a positive multiple of 8, got {args.shape}")
    cases = D.generate_synthetic(args.n, (args.shape,) * 3, args.seed)
    try:
        manifest = D.write_dataset(args.out, cases)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}") from None
    print(f"wrote {args.n} volumes and masks to {args.out} ({manifest.name})")
    return EXIT_OK


def _load_pairs(data_dir):
    try:
        return D.load_dataset(data_dir)
    except (OSError, D.VolumeIOError) as e:
        raise UsageError(f"cannot load dataset {data_dir}: {e}") from None


def build_config(args) -> TR.TrainConfig:
    values: dict = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        values.update(parse_config_text(text, args.config))
    for item in args.set or ():
        values.update(parse_config_text(item, "--set"))
    if args.ablation is not None:
        values.update(parse_ablation(args.ablation))
    if args.no_consistency:
        values["enable_consistency"] = False
    for key in ("labelled_fraction", "t_max", "seed", "eval_every"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    try:
        return TR.TrainConfig.from_dict(values).validate()
    except (ConfigurationError, ValueError) as e:
        raise UsageError(str(e)) from None


CONFIG_FLAGS = ("config", "set", "ablation", "labelled_fraction", "t_max", "seed", "eval_every")


def _resume_config(args) -> TR.TrainConfig:
    given = [f for f in CONFIG_FLAGS if getattr(args, f)] + (["no_consistency"] if args.no_consistency else [])
    if given:
        raise UsageError("--resume takes its configuration from the checkpoint; drop "
                         + ", ".join("--" + f.replace("_", "-") for f in given))
    try:
        meta, _ = TR.read_checkpoint(args.resume)
        return TR.TrainConfig.from_dict(meta["config"]).validate()
    except (OSError, TR.CheckpointError, ConfigurationError, KeyError) as e:
        raise UsageError(f"cannot resume from {args.resume}: {e}") from None


def cmd_train(args) -> int:
    cfg = _resume_config(args) if args.resume else build_config(args)
    pairs, _ = _load_pairs(args.data)
    try:
        split = D.split(pairs, cfg.labelled_fraction, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    eval_set, eval_ids = [], None
    if args.eval_data:
        ev_pairs, ev_ids = _load_pairs(args.eval_data)
        keep = [i for i, (_, m) in enumerate(ev_pairs) if m is not None]
        eval_set, eval_ids = [ev_pairs[i] for i in keep], [ev_ids[i] for i in keep]
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {out}: {e}") from None
    trainer = None
    if args.resume:
        try:
            trainer = TR.Trainer.from_checkpoint(args.resume, split)
        except (OSError, TR.CheckpointError, ConfigurationError, KeyError) as e:
            raise UsageError(f"cannot resume from {args.resume}: {e}") from None
    manifest = RunManifest(
        config=cfg.to_dict(), seed=cfg.seed, code_version=__version__, threads=thread_count(),
        outputs={k: str(out / v) for k, v in
                 (("runlog", "runlog.csv"), ("eval", "eval.csv"), ("eval_history", "eval_history.csv"),
                  ("last_checkpoint", "last.dckp"), ("best_checkpoint", "best.dckp"))},
        data=str(args.data), eval_data=str(args.eval_data or ""), resumed_from=str(args.resume or ""),
    )
    manifest.write(out / RP.MANIFEST)
    start = time.perf_counter()

    def progress(rec):
        if args.verbose and (rec.step % 50 == 0 or rec.step == cfg.t_max - 1):
            b = rec.breakdown
            print(f"step {rec.step:5d}  l_total={b.l_total:.4f}  l_sup={b.l_sup:.4f}  "
                  f"lambda={b.lambda_cst:.3e}  dis={rec.disagreement:.4f}  {time.perf_counter() - start:.0f}s",
                  flush=True)

    try:
        res = TR.run(cfg, split, eval_set, eval_ids, out, trainer=trainer, progress=progress)
    except TR.NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if res.evals:
        agg = res.evals[-1][1]
        print(f"final dice={agg.dice:.2f} jaccard={agg.jaccard:.2f} asd={agg.asd:.3f} hd95={agg.hd95:.3f}")
    print(f"trained {cfg.t_max} steps in {time.perf_counter() - start:.0f}s -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        models, _ = TR.models_from_checkpoint(args.checkpoint)
    except (OSError, TR.CheckpointError, ConfigurationError, KeyError) as e:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    pairs, ids = _load_pairs(args.data)
    keep = [i for i, (_, m) in enumerate(pairs) if m is not None]
    if not keep:
        raise UsageError(f"{args.data} has no labelled volumes to evaluate")
    try:
        reports = TR.evaluate(models, [pairs[i] for i in keep], [ids[i] for i in keep])
    except ValueError as e:
        raise UsageError(f"checkpoint does not fit the data: {e}") from None
    try:
        MT.write_csv(args.out, reports)
    except OSError as e:
        raise UsageError(f"cannot write {args.out}: {e}") from None
    agg = MT.aggregate(reports)
    print(f"{len(reports)} cases  mean dice={agg.dice:.2f} jaccard={agg.jaccard:.2f} -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    results = GC.run_suite(args.seed, args.n_seeds)
    print(GC.format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} ops within {GC.TOLERANCE:g}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        table, curves = RP.build_report(args.runs, args.out)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    print(f"wrote {table} and {curves}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dihc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic ellipsoid dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--shape", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the three-model ensemble")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", help="labelled dataset scored every eval_every steps")
    t.add_argument("--labelled-fraction", dest="labelled_fraction", type=float)
    t.add_argument("--t-max", dest="t_max", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--ablation", help="full (default), none, or a comma list from imd,ms,dihc")
    t.add_argument("--no-consistency", action="store_true", help="supervision-only baseline")
    t.add_argument("--config", help="flat 'key = value' file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--out", required=True)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labelled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=GC.DEFAULT_SEEDS)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="aggregate runs into comparison and curve CSVs")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _limit_threads(thread_count()) or contextlib.nullcontext():
            return args.func(args)
    except UsageError as e:
        print(f"dihc: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
