"""Command-line front end: ``pwcf synth|train|encode|retrieve|eval|ablate``.

Every command prints its resolved configuration to standard output before
doing any work.  Errors go to standard error as ``pwcf: error: ...`` with a
nonzero exit status.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, hamming
from .baselines import KINDS as BASELINE_KINDS, fit_baseline
from .dataio import ABLATION_FLAGS, VARIANTS, RunConfig, ShiftSpec
from .objective import LossBreakdown
from .optimizer import load_model, save_model, train

PROG = "pwcf"
SEED_ENV = "PWCF_SEED"

log = logging.getLogger(__name__)


class CliError(Exception):
    """A user-facing failure; the message is printed after the error prefix."""


# ---------------------------------------------------------------------------
# flag parsing helpers
# ---------------------------------------------------------------------------


def parse_int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return tuple(values)


def resolve_ablation(token):
    """Map ``disable_manifold``, ``PWCF-M`` or ``M`` to the flag name."""
    token = token.strip()
    if token in ABLATION_FLAGS:
        return token
    name = token.upper()
    if not name.startswith("PWCF-"):
        name = "PWCF-" + name
    if name in VARIANTS:
        return VARIANTS[name]
    raise CliError(f"unknown ablation {token!r}; use one of "
                   f"{', '.join(ABLATION_FLAGS)} or {', '.join(VARIANTS)}")


def parse_ablations(text):
    if not text:
        return []
    flags = []
    for token in text.split(","):
        if token.strip():
            flag = resolve_ablation(token)
            if flag not in flags:
                flags.append(flag)
    return flags


def resolve_seed(flag_value, config_seed=None):
    """Seed precedence: ``--seed``, then the config file, then ``PWCF_SEED``, then 0."""
    if flag_value is not None:
        return flag_value
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def resolve_config(args):
    """Defaults, then the ``--config`` file, then command-line overrides."""
    mapping = {}
    if getattr(args, "config", None):
        mapping = dataio.read_kv(args.config)
    config = RunConfig.from_mapping(mapping)
    changes = {"seed": resolve_seed(args.seed, int(config.seed) if "seed" in mapping else None)}
    if getattr(args, "bits", None) is not None:
        changes["r"] = args.bits
    config = config.replace(**changes)
    ablate = parse_ablations(getattr(args, "ablate", None))
    return config.with_ablations(ablate)


def emit_config(title, mapping, out=None):
    out = out or sys.stdout
    out.write(f"# {title}\n")
    out.write(dataio.format_kv(mapping))
    out.flush()


def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need_truth(pair, manifest):
    if pair.target_truth is None:
        raise CliError(f"{manifest}: evaluation needs target_labels in the manifest")


# ---------------------------------------------------------------------------
# trace output
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("iter",) + LossBreakdown.COLUMNS


def format_trace(trace):
    lines = ["\t".join(TRACE_COLUMNS)]
    for i, row in enumerate(trace):
        lines.append("\t".join([str(i)] + [repr(float(v)) for v in row.as_tuple()]))
    return "\n".join(lines) + "\n"


def read_trace(path):
    """Parse a trace file back into an ``(iters, 7)`` float array."""
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or tuple(rows[0].split("\t")) != TRACE_COLUMNS:
        raise dataio.DataFormatError(f"{path}: not a trace file")
    return np.array([[float(v) for v in row.split("\t")] for row in rows[1:]])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    seed = resolve_seed(args.seed)
    shift = ShiftSpec(args.rotation, args.translation, args.noise)
    settings = {
        "classes": args.classes, "dim": args.dim,
        "n_source": args.n_source, "n_target": args.n_target,
        "rotation": repr(args.rotation), "translation": repr(args.translation),
        "noise": repr(args.noise), "class_sep": repr(args.class_sep),
        "cluster_std": repr(args.cluster_std), "nuisance_dim": args.nuisance_dim,
        "nuisance_std": repr(args.nuisance_std), "seed": seed, "format": args.format,
        "out": args.out,
    }
    emit_config("synth", settings)
    pair = dataio.generate_synthetic_pair(
        args.classes, args.dim, args.n_source, args.n_target, shift, seed=seed,
        class_sep=args.class_sep, cluster_std=args.cluster_std,
        nuisance_dim=args.nuisance_dim, nuisance_std=args.nuisance_std)
    path = dataio.write_manifest(_out_dir(args.out), pair, args.format)
    print(f"wrote {path}")
    return 0


def cmd_train(args):
    config = resolve_config(args)
    emit_config("train", {"method": args.method, "data": args.data, "out": args.out,
                          **config.to_mapping()})
    pair = dataio.load_manifest(args.data)
    out = _out_dir(args.out)
    if args.method == "pwcf":
        model, codes = train(pair, config, log_every=args.log_every)
        source_codes = hamming.pack(codes.B_s)
        target_codes = hamming.pack(codes.B_t)
        (out / "trace.txt").write_text(format_trace(model.trace), encoding="utf-8")
    else:
        pooled = np.concatenate([pair.target, pair.source], axis=1)
        model = fit_baseline(args.method, pooled, config.r, config.seed)
        source_codes = model.encode(pair.source)
        target_codes = model.encode(pair.target)
    save_model(out / "model.pwm", model)
    hamming.save_codes(out / "source_codes.pwb", source_codes)
    hamming.save_codes(out / "target_codes.pwb", target_codes)
    (out / "config.kv").write_text(dataio.format_kv(config.to_mapping()), encoding="utf-8")
    if model.trace:
        first, last = model.trace[0].total, model.trace[-1].total
        print(f"iterations {len(model.trace) - 1} objective {first:.6g} -> {last:.6g}")
    print(f"wrote {out / 'model.pwm'}")
    return 0


def cmd_encode(args):
    emit_config("encode", {"model": args.model, "data": args.data, "out": args.out})
    model = load_model(args.model)
    X = dataio.load_feature_matrix(args.data)
    if X.shape[0] != model.dim:
        raise CliError(f"model expects d={model.dim} but {args.data} has d={X.shape[0]}")
    codes = model.encode(X)
    hamming.save_codes(args.out, codes)
    print(f"wrote {codes.n} codes of {codes.r} bits to {args.out}")
    return 0


def format_ranking(result, top):
    lines = []
    for q in range(result.indices.shape[0]):
        idx = result.indices[q, :top]
        dist = result.distances[q, :top]
        lines.append(f"{q}\t" + " ".join(f"{i}:{d}" for i, d in zip(idx, dist)))
    return "\n".join(lines) + "\n"


def cmd_retrieve(args):
    emit_config("retrieve", {"query_codes": args.query_codes, "db_codes": args.db_codes,
                             "top": args.top if args.top else "all", "out": args.out})
    queries = hamming.load_codes(args.query_codes)
    database = hamming.load_codes(args.db_codes)
    if queries.r != database.r:
        raise CliError(f"code lengths differ: queries r={queries.r}, database r={database.r}")
    result = hamming.retrieve(queries, database)
    top = args.top or database.n
    Path(args.out).write_text(format_ranking(result, top), encoding="utf-8")
    print(f"wrote rankings for {queries.n} queries to {args.out}")
    return 0


def _eval_settings(args, seed, k_grid):
    return {"protocol": evaluation._normalize_protocol(args.protocol),
            "trials": args.trials, "queries": args.queries, "seed": seed,
            "k_grid": ",".join(str(k) for k in k_grid)}


def write_report(out, report, title):
    out = _out_dir(out)
    (out / "report.txt").write_text(evaluation.format_table(report, title), encoding="utf-8")
    (out / "report.kv").write_text(evaluation.format_kv(report), encoding="utf-8")
    (out / "precision.txt").write_text(evaluation.format_curve(report.precision_at),
                                       encoding="utf-8")
    (out / "recall.txt").write_text(evaluation.format_curve(report.recall_at),
                                    encoding="utf-8")
    return out


def cmd_eval(args):
    model = load_model(args.model)
    seed = resolve_seed(args.seed, model.config.seed)
    k_grid = args.k_grid or evaluation.DEFAULT_K_GRID
    settings = _eval_settings(args, seed, k_grid)
    emit_config("eval", {"model": args.model, "data": args.data, "out": args.out,
                         "kind": model.kind, "bits": model.bits, **settings})
    if args.bits is not None and args.bits != model.bits:
        raise CliError(f"--bits {args.bits} does not match the model's {model.bits} bits")
    pair = dataio.load_manifest(args.data)
    _need_truth(pair, args.data)
    if pair.dim != model.dim:
        raise CliError(f"model expects d={model.dim} but {args.data} has d={pair.dim}")
    report = evaluation.evaluate_model(model, pair, settings["protocol"], args.trials,
                                       args.queries, k_grid, seed)
    out = write_report(args.out, report, f"{model.kind} {settings['protocol']}")
    print(f"map {report.map:.6f} std {report.std:.6f} over {len(report.trials)} trials")
    print(f"wrote {out / 'report.txt'}")
    return 0


def format_ablation(rows):
    lines = [f"{'variant':<10}{'map':>12}{'std':>12}{'stderr':>12}"]
    for name, rep in rows:
        lines.append(f"{name:<10}{rep.map:>12.6f}{rep.std:>12.6f}{rep.stderr:>12.6f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    base = resolve_config(argparse.Namespace(config=args.config, seed=args.seed,
                                             bits=args.bits, ablate=None))
    flags = parse_ablations(args.ablate) or list(ABLATION_FLAGS)
    names = {flag: name for name, flag in VARIANTS.items()}
    k_grid = args.k_grid or evaluation.DEFAULT_K_GRID
    settings = _eval_settings(args, base.seed, k_grid)
    emit_config("ablate", {"data": args.data, "out": args.out,
                           "variants": ",".join(names[f] for f in flags),
                           "baselines": str(args.baselines).lower(),
                           **settings, **base.to_mapping()})
    pair = dataio.load_manifest(args.data)
    _need_truth(pair, args.data)
    runs = [("PWCF", base, "pwcf")]
    runs += [(names[f], base.with_ablations([f]), "pwcf") for f in flags]
    if args.baselines:
        runs += [(kind, base, kind) for kind in BASELINE_KINDS]
    rows = []
    for name, config, method in runs:
        rep = evaluation.run_trials(pair, config, settings["protocol"], args.trials,
                                    args.queries, k_grid, method=method)
        rows.append((name, rep))
        print(f"{name:<10} map {rep.map:.6f} std {rep.std:.6f}")
    out = _out_dir(args.out)
    (out / "ablation.txt").write_text(format_ablation(rows), encoding="utf-8")
    kv = {}
    for name, rep in rows:
        key = name.lower().replace("-", "_")
        kv[f"{key}_map"] = f"{rep.map:.10f}"
        kv[f"{key}_std"] = f"{rep.std:.10f}"
    (out / "ablation.kv").write_text(dataio.format_kv(kv), encoding="utf-8")
    print(f"wrote {out / 'ablation.txt'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_eval_flags(p):
    p.add_argument("--protocol", choices=("cross", "single"), default="cross",
                   help="rank source items (cross) or other target items (single)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--queries", type=int, default=500, help="queries per trial")
    p.add_argument("--k-grid", type=parse_int_list, default=None,
                   help="retrieved counts for precision/recall, e.g. 1,10,100")


class _Parser(argparse.ArgumentParser):
    """Usage errors keep the same ``pwcf: error:`` prefix as runtime errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{PROG}: error: {message}\n")


def build_parser():
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic two-domain dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-source", type=int, default=1000)
    p.add_argument("--n-target", type=int, default=1000)
    p.add_argument("--rotation", type=float, default=30.0, help="degrees")
    p.add_argument("--translation", type=float, default=60.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--class-sep", type=float, default=2.0)
    p.add_argument("--cluster-std", type=float, default=1.0)
    p.add_argument("--nuisance-dim", type=int, default=32)
    p.add_argument("--nuisance-std", type=float, default=3.0)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn a model from a dataset manifest")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--bits", type=int, default=None, help="code length r")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", default=None, help="comma-separated ablation switches")
    p.add_argument("--method", choices=("pwcf",) + BASELINE_KINDS, default="pwcf")
    p.add_argument("--log-every", type=int, default=0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="hash a feature file with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="PWF1 or CSV feature file")
    p.add_argument("--out", required=True, help="output PWB1 codes file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="rank database codes for each query code")
    p.add_argument("--query-codes", required=True)
    p.add_argument("--db-codes", required=True)
    p.add_argument("--top", type=int, default=0, help="keep the first N results (0 = all)")
    p.add_argument("--out", required=True, help="output ranking text file")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="query-split evaluation of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset manifest with target labels")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--bits", type=int, default=None, help="expected code length (checked)")
    p.add_argument("--seed", type=int, default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="retrain and evaluate ablation variants")
    p.add_argument("--data", required=True, help="dataset manifest with target labels")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", default=None,
                   help="variants to run, e.g. M,H or disable_manifold (default: all six)")
    p.add_argument("--baselines", action="store_true", help="also run LSH and PCA-sign")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format=f"{PROG}: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, OSError) and exc.filename is not None:
            msg = f"{exc.strerror or exc}: {exc.filename}"
        else:
            msg = str(exc)
        sys.stderr.write(f"{PROG}: error: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
