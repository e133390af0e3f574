"""``anast`` command line: gen-synth, run, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import SnapshotError, load_state, predict, save_state
from .data import (
    FormatError,
    ManifestError,
    SyntheticSpec,
    gen_synthetic,
    load_features,
    load_manifest,
    save_features,
)
from .protocol import METHODS, ScenarioError, run_method
from .verify import EQUIVALENCE_RTOL, faum_update, faum_update_literal, run_equivalence_suite

log = logging.getLogger("anast")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"anast: error: {msg}", file=sys.stderr)
    return code


def cmd_gen_synth(args) -> int:
    try:
        spec = SyntheticSpec(
            classes=args.classes,
            per_class=args.per_class,
            dim=args.dim,
            separation=args.sep,
            std=args.std,
            seed=args.seed,
        )
    except ValueError as exc:
        return _fail(f"invalid synthetic spec: {exc}")
    store = gen_synthetic(spec)
    try:
        save_features(store, args.output)
    except OSError as exc:
        return _fail(f"cannot write {args.output}: {exc.strerror}")
    print(
        f"wrote {args.output}: rows={store.n_rows} classes={spec.classes} "
        f"per_class={spec.per_class} d_in={store.feature_dim}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        manifest = load_manifest(args.manifest).with_overrides(
            gamma=args.gamma,
            expansion_size=args.expansion_size,
            activation=args.activation,
            expansion_seed=args.expansion_seed,
            split_seed=args.split_seed,
            no_expansion=args.no_expansion,
        )
    except FileNotFoundError as exc:
        return _fail(f"manifest not found: {exc.filename}")
    except (ManifestError, FormatError) as exc:
        return _fail(str(exc))

    log.info("running %s on scenario %r (%d tasks)", args.method, manifest.name, len(manifest.tasks))
    try:
        report = run_method(args.method, manifest)
    except ScenarioError as exc:
        return _fail(str(exc))

    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{args.method}.json").write_text(report.to_json(), encoding="utf-8")
        (out / f"accuracy_{args.method}.tsv").write_text(report.flat_table(), encoding="utf-8")
        if args.method == "anast":
            (out / "model.anst").write_bytes(save_state(report.model))
    except OSError as exc:
        return _fail(f"cannot write outputs to {out}: {exc.strerror}")
    for t, row in enumerate(report.accuracy.rows()):
        if row is not None:
            log.info("after %s: %s", report.task_names[t], " ".join(f"{a:.4f}" for a in row))
    flag = "" if report.bwt_defined else " (BWT undefined)"
    print(f"ACC={report.acc:.6f} BWT={report.bwt:.6f}{flag}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state = load_state(Path(args.model).read_bytes())
        store = load_features(args.features)
    except OSError as exc:
        return _fail(f"cannot read {exc.filename}: {exc.strerror}")
    except (SnapshotError, FormatError) as exc:
        return _fail(str(exc))
    if store.feature_dim != state.projector.input_dim:
        return _fail(
            f"feature dimension mismatch: file has d_in={store.feature_dim}, "
            f"model expects d_in={state.projector.input_dim}"
        )
    if store.n_rows == 0:
        return _fail("feature file has no rows")
    preds = predict(state, store.features)
    truth = list(store.labels)
    unknown = sorted({lab for lab in truth if lab not in state.registry})
    if unknown:
        print(f"warning: labels unknown to the model, scored as wrong: {', '.join(unknown)}", file=sys.stderr)
    hits = sum(p == t for p, t in zip(preds, truth))
    print(f"accuracy={hits / len(truth):.6f} ({hits}/{len(truth)})")
    print("true\tpredicted\tcount")
    for (t, p), n in sorted(Counter(zip(truth, preds)).items()):
        print(f"{t}\t{p}\t{n}")
    if args.table:
        lines = ["row\ttrue\tpredicted"] + [f"{i}\t{t}\t{p}" for i, (t, p) in enumerate(zip(truth, preds))]
        Path(args.table).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.trials < 1 or args.max_dim < 1:
        return _fail("--trials and --max-dim must be >= 1")
    rule = faum_update_literal if args.faum_form == "literal" else faum_update
    results = run_equivalence_suite(args.trials, args.seed, args.max_dim, faum=rule)
    errors = [max(r.weight_error, r.faum_error) for r in results]
    bad = [r for r in results if not r.ok]
    print(
        f"trials={len(results)} max_weight_error={max(r.weight_error for r in results):.3e} "
        f"max_faum_error={max(r.faum_error for r in results):.3e} tolerance={EQUIVALENCE_RTOL:g}"
    )
    for r in bad:
        why = r.failure or f"relative error {max(r.weight_error, r.faum_error):.3e}"
        print(f"FAIL {r.scenario.describe()}: {why}")
    log.debug("errors: %s", np.array(errors))
    return EXIT_FAILED if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anast", description="Analytic class-incremental learning harness")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write a synthetic Gaussian-blob feature file")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--sep", type=float, default=10.0, help="distance between class means")
    g.add_argument("--std", type=float, default=0.5, help="within-class standard deviation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True, help=".anft (binary) or .csv/.txt (text)")
    g.set_defaults(func=cmd_gen_synth)

    r = sub.add_parser("run", parents=[common], help="run a class-incremental scenario")
    r.add_argument("-m", "--manifest", required=True)
    r.add_argument("-o", "--output", required=True, help="output directory")
    r.add_argument("--method", choices=sorted(METHODS), default="anast")
    r.add_argument("--gamma", type=float)
    r.add_argument("--expansion-size", type=int)
    r.add_argument("--activation", choices=["identity", "relu"])
    r.add_argument("--expansion-seed", type=int)
    r.add_argument("--split-seed", type=int)
    r.add_argument("--no-expansion", action="store_true", help="skip the random expansion layer")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="score a saved model on a feature file")
    e.add_argument("--model", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--table", help="write per-row predictions as TSV")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="randomized recursive-vs-joint equivalence check")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-dim", type=int, default=64)
    v.add_argument("--faum-form", choices=["woodbury", "literal"], default="woodbury", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def _thread_limit():
    raw = os.environ.get("ANAST_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ANAST_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"ANAST_THREADS must be a non-negative integer, got {raw!r}")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        limit = _thread_limit()
    except UsageError as exc:
        return _fail(str(exc))
    with limit:
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
