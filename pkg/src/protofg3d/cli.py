"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import transport
from .config import TrainConfig, config_from_text, dump_config, load_config, parse_overrides
from .data import SynthSpec, generate_synthetic, import_csv, read_dataset, stratified_split, write_dataset
from .errors import ContractError, DataError, NumericalError, ParseError
from .pipeline import baseline_train_eval, evaluate, inspect, load_model, save_model, train

log = logging.getLogger("protofg3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protofg3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset (PFGE)")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--subclusters", type=int, default=3)
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--counts", type=_int_list, help="shapes per class, comma-separated")
    s.add_argument("--noise", type=float, default=0.02, help="per-coordinate Gaussian sigma")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)

    s = sub.add_parser("import", help="convert a CSV of precomputed view embeddings to PFGE")
    s.add_argument("csv")
    s.add_argument("-o", "--output", required=True)

    def add_config(sp):
        sp.add_argument("-c", "--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    s = sub.add_parser("train", help="train encoder + prototype pool")
    add_config(s)
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output-dir", required=True)
    s.add_argument("--baseline", action="store_true", help="also train the linear softmax comparator")

    s = sub.add_parser("eval", help="evaluate a model on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--aggregation", choices=["min_distance", "mean_embedding"])
    s.add_argument("-o", "--output-dir")

    s = sub.add_parser("inspect", help="prototype matches and top views per test shape")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("-m", type=int, default=3, help="prototypes to report per shape")
    s.add_argument("-o", "--output-dir", required=True)

    s = sub.add_parser("sweep", help="train/eval over a grid of config values")
    add_config(s)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("-o", "--output-dir")
    s.add_argument("--parallel", action="store_true", help="run cells in worker processes (PROTO_FG3D_THREADS caps them)")

    s = sub.add_parser("ot-solve", help="solve one assignment problem from a CSV similarity matrix")
    s.add_argument("matrix", help="K rows of V comma-separated similarities, no header")
    s.add_argument("--kappa", type=float, default=0.05)
    s.add_argument("--solver", choices=["sinkhorn", "apdagd"], default="sinkhorn")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("-o", "--output", help="also write the report to this file")
    return p


# ---------------------------------------------------------------------------


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    try:
        values = parse_overrides(((i, text) for i, text in enumerate(args.set, start=1)), source="--set")
        return cfg.replace(**values)
    except ParseError as e:
        raise UsageError(str(e)) from None
    except ContractError as e:
        raise UsageError(f"--set: {e}") from None


def _load_splits(path, split="test"):
    ds = read_dataset(path)
    train_ds, test_ds = stratified_split(ds)
    return ds, train_ds, test_ds, {"train": train_ds, "test": test_ds, "all": ds}[split]


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    counts = args.counts or [100] * args.classes
    try:
        spec = SynthSpec(
            class_count=args.classes,
            views_per_shape=args.views,
            dim=args.dim,
            subclusters_per_class=args.subclusters,
            per_class_shape_counts=tuple(counts),
            intra_cluster_noise=args.noise,
            seed=args.seed,
        )
    except ContractError as e:
        raise UsageError(f"synth: {e}") from None
    data = generate_synthetic(spec)
    write_dataset(data.full, args.output)
    print(f"wrote {args.output}: {len(data.full)} shapes, C={spec.class_count} V={spec.views_per_shape} D={spec.dim}")


def cmd_import(args):
    ds = import_csv(args.csv)
    write_dataset(ds, args.output)
    print(f"wrote {args.output}: {len(ds)} shapes, C={ds.num_classes} V={ds.view_count} D={ds.dim}")


def cmd_train(args):
    cfg = _resolve_config(args)
    _, train_ds, test_ds, _ = _load_splits(args.data)
    out = _out_dir(args.output_dir)
    model, tally = train(train_ds, cfg, test_ds if len(test_ds) else None)
    save_model(model, out / "model.pfgm")
    (out / "metrics.log").write_text(tally.text(), encoding="utf-8")
    if tally.solver_failures:
        log.warning("%d transport solves stopped at max_iters", tally.solver_failures)
    last = tally.records[-1]
    print(f"wrote {out / 'model.pfgm'}; final {last.line()}")
    if args.baseline:
        report, blog = baseline_train_eval(train_ds, test_ds, cfg)
        (out / "baseline_metrics.log").write_text(blog.text(), encoding="utf-8")
        (out / "baseline_eval.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
        print(f"baseline AIA {report.aia:.4f} ACA {report.aca:.4f}")


def cmd_eval(args):
    model = load_model(args.model)
    *_, ds = _load_splits(args.data, args.split)
    if len(ds) == 0:
        raise UsageError(f"--split {args.split}: no shapes in {args.data}")
    report = evaluate(model, ds, aggregation=args.aggregation)
    print(report.table())
    if args.output_dir:
        out = _out_dir(args.output_dir)
        (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def cmd_inspect(args):
    model = load_model(args.model)
    *_, ds = _load_splits(args.data, args.split)
    try:
        report = inspect(model, ds, m=args.m)
    except ContractError as e:
        raise UsageError(f"-m: {e}") from None
    out = _out_dir(args.output_dir)
    (out / "inspect.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"wrote {out / 'inspect.json'} ({len(report)} shapes)")


def _parse_grid(specs):
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--grid {spec!r}: expected KEY=V1,V2,...")
        key, values = spec.split("=", 1)
        try:
            parsed = [parse_overrides([(1, f"{key.strip()}={v}")], source="--grid") for v in values.split(",") if v.strip()]
        except ParseError as e:
            raise UsageError(str(e)) from None
        if not parsed:
            raise UsageError(f"--grid {spec!r}: no values")
        axes.append(parsed)
    return [dict(kv for d in combo for kv in d.items()) for combo in itertools.product(*axes)]


def run_cell(base_text: str, cell: dict, data_path: str) -> dict:
    """Train and evaluate one sweep cell (process-safe: takes only plain values)."""
    cfg = config_from_text(base_text).replace(**cell)
    _, train_ds, test_ds, _ = _load_splits(data_path)
    model, tally = train(train_ds, cfg)
    report = evaluate(model, test_ds)
    return {**cell, "aia": report.aia, "aca": report.aca, "gap": report.aia - report.aca,
            "l_total": tally.records[-1].l_total}


def _workers() -> int:
    raw = os.environ.get("PROTO_FG3D_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PROTO_FG3D_THREADS={raw!r} is not an integer") from None
    return n if n > 0 else (os.cpu_count() or 1)


def cmd_sweep(args):
    base = _resolve_config(args)
    cells = _parse_grid(args.grid)
    try:
        for cell in cells:
            base.replace(**cell)
    except ContractError as e:
        raise UsageError(f"--grid: {e}") from None
    read_dataset(args.data)  # fail early on a bad file
    text = dump_config(base)
    if args.parallel and len(cells) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(_workers(), len(cells))) as pool:
            rows = list(pool.map(run_cell, [text] * len(cells), cells, [args.data] * len(cells)))
    else:
        rows = [run_cell(text, cell, args.data) for cell in cells]
    keys = list(cells[0])
    header = "\t".join(keys + ["aia", "aca", "gap", "l_total"])
    lines = [header] + [
        "\t".join([str(r[k]) for k in keys] + [f"{r['aia']:.6f}", f"{r['aca']:.6f}", f"{r['gap']:.6f}", f"{r['l_total']:.6f}"])
        for r in rows
    ]
    print("\n".join(lines))
    if args.output_dir:
        out = _out_dir(args.output_dir)
        (out / "sweep.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError as e:
            raise ParseError(str(e), line=lineno, path=path) from None
        if len(rows[-1]) != len(rows[0]):
            raise ParseError(f"expected {len(rows[0])} values, found {len(rows[-1])}", line=lineno, path=path)
    if not rows:
        raise ParseError("empty matrix", line=1, path=path)
    return np.array(rows)


def cmd_ot_solve(args):
    S = read_matrix_csv(args.matrix)
    try:
        cfg = transport.SolverConfig(args.kappa, args.max_iters, args.tol, args.solver)
    except ContractError as e:
        raise UsageError(str(e)) from None
    scalings = None
    if cfg.solver_kind is transport.SolverKind.SINKHORN:
        Z, scalings, it = transport.sinkhorn_assign(S, cfg)
    else:
        Z, it = transport.apdagd_assign(S, cfg)
    report = transport.format_report(S, Z, it, scalings)
    print(report, end="")
    if args.output:
        Path(args.output).write_text(report, encoding="utf-8")


COMMANDS = {
    "synth": cmd_synth,
    "import": cmd_import,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
    "ot-solve": cmd_ot_solve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ContractError) as e:
        print(f"protofg3d {args.command}: error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"protofg3d {args.command}: data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"protofg3d {args.command}: numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
