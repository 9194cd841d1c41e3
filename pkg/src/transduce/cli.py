"""Command-line front end.

Exit codes: 0 success, 1 validation failure, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ptns
from .features import SyntheticExtractorConfig, synth_extract
from .grid import CATEGORICAL, SCALAR, FeaturePyramid, GridError, LabelMap
from .harness.metrics import miou, rmse_depth
from .harness.scenario import load_scenario, run_scenario
from .harness.shapes import make_dataset
from .harness.tta import DEFAULT_SCALES, tta_predict
from .memory import MemoryStore
from .mp import MPConfig
from .search import SearchConfig, exhaustive_oracle, hierarchical_search
from .solver import Solver, SolverConfig

log = logging.getLogger("transduce")

CONFIG_ECHO = "run_config.txt"
EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ValidationFailure(Exception):
    """A check ran to completion and did not pass."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out: Path, args: argparse.Namespace, **extra) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "force", "verbose")}
    items.update(extra)
    lines = [f"{k}={_fmt(v)}" for k, v in sorted(items.items())]
    (out / CONFIG_ECHO).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, Path):
        return str(v)
    return repr(v) if isinstance(v, float) else str(v)


def _scales(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


def _read_input(path: Path, levels: int, seed: int) -> tuple[FeaturePyramid, np.ndarray | None]:
    """A one-level file is an input grid (run through the extractor); more levels is a pyramid."""
    f = ptns.read_ptns(path)
    if len(f.levels) == 1 and not f.sparse:
        grid = ptns.read_grid(path)
        return synth_extract(grid, SyntheticExtractorConfig(seed=seed, n=levels)), grid
    return ptns.pyramid_from_file(f), None


def _search_config(args) -> SearchConfig:
    return SearchConfig(
        phi=args.phi,
        k_init=args.k_init,
        kernel_mode=args.kernel,
        chunk=args.chunk,
        workers=args.threads,
    )


def _add_search_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--phi", type=float, default=0.5, help="beam decay factor (default 0.5)")
    p.add_argument("--k-init", type=int, default=None, help="initial beam width (default: m)")
    p.add_argument("--kernel", default="window", choices=["window", "structural", "full"])
    p.add_argument("--chunk", type=int, default=None, help="query nodes per processing window")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _prepare_out(args.out, args.force)
    classes = tuple(int(c) for c in args.classes.split(","))
    data = make_dataset(args.seed, args.count, (args.res, args.res), classes, args.shapes)
    num_classes = max(classes) + 1
    for i, scene in enumerate(data):
        ptns.write_grid(out / f"x{i:04d}.in.ptns", scene.image, 2)
        ptns.write_labels(out / f"x{i:04d}.lab.ptns", LabelMap.from_classes(scene.classes, num_classes))
    _echo_config(out, args)
    print(f"wrote {len(data)} samples to {out}")
    return EXIT_OK


def cmd_build_memory(args) -> int:
    if len(args.inputs) != len(args.labels):
        raise GridError(f"{len(args.inputs)} inputs but {len(args.labels)} label files")
    out = _prepare_out(args.out, args.force)
    store = None
    for inp, lab in zip(args.inputs, args.labels):
        pyr, grid = _read_input(inp, args.levels, args.seed)
        if store is None:
            extractor = SyntheticExtractorConfig(seed=args.seed, n=args.levels).describe() if grid is not None else {"name": "imported"}
            store = MemoryStore(n_sp=args.n_sp, extractor=extractor)
        labels = ptns.read_labels(lab, SCALAR if args.task == "depth" else CATEGORICAL)
        sid = Path(inp).name.split(".")[0]
        store.consolidate_add(pyr, labels, sample_id=sid if sid not in store else None, provenance=Path(inp).name)
    store.save(out)
    _echo_config(out, args)
    print(f"stored m={store.m} samples (n_sp={store.n_sp}) in {out}")
    return EXIT_OK


def _solver_for(store: MemoryStore, args, use_mp: bool) -> Solver:
    desc = store.config.extractor
    extractor = SyntheticExtractorConfig.from_description(desc) if desc.get("name") == "synthetic" else None
    mp = MPConfig(lam=args.lam, kappa=args.kappa, max_steps=args.max_steps, tol=args.tol)
    return Solver(store, extractor, SolverConfig(_search_config(args), mp, use_mp))


def _query_for(store: MemoryStore, path: Path):
    f = ptns.read_ptns(path)
    if len(f.levels) == 1 and not f.sparse:
        if store.config.extractor.get("name") != "synthetic":
            raise GridError("store holds imported pyramids; pass the query as a pyramid file")
        return ptns.read_grid(path)
    return ptns.pyramid_from_file(f)


def cmd_predict(args) -> int:
    store = MemoryStore.load(args.store)
    query = _query_for(store, args.query)
    solver = _solver_for(store, args, not args.no_mp)
    out = _prepare_out(args.out, args.force)
    pred = solver.predict(query)
    if args.no_tta:
        final = pred.labels
    else:
        if isinstance(query, FeaturePyramid):
            raise GridError("test-time augmentation needs an input grid; pass --no-tta for pyramid queries")
        final = tta_predict(solver, query, _scales(args.scales))
    ptns.write_labels(out / "pred.lab.ptns", final)
    if args.emit_diagnostics:
        ptns.write_labels(out / "raw.lab.ptns", pred.raw)
        res = pred.cmap.query_res
        ptns.write_grid(out / "idx.ptns", pred.cmap.idx_panel().reshape(res).astype(np.float32), len(res))
        ptns.write_grid(out / "sim.ptns", pred.cmap.sim_panel().reshape(res), len(res))
        lines = [f"comparisons={pred.cmap.comparisons}", "level_k=" + ",".join(f"{l}:{k}" for l, k in sorted(pred.cmap.level_k.items()))]
        if pred.mp_report is not None:
            lines.append(f"mp_steps={pred.mp_report.steps}")
            lines.append(f"mp_converged={pred.mp_report.converged}")
            lines.append("mp_deltas=" + ",".join(repr(d) for d in pred.mp_report.deltas))
        (out / "diagnostics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _echo_config(out, args)
    print(f"prediction written to {out / 'pred.lab.ptns'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    kind = SCALAR if args.task == "depth" else CATEGORICAL
    pred = ptns.read_labels(args.pred, kind)
    gt = ptns.read_labels(args.gt, kind)
    if pred.res != gt.res:
        raise GridError(f"prediction grid {pred.res} != ground truth {gt.res}")
    if args.out.exists() and not args.force:
        raise FileExistsError(f"{args.out} exists; pass --force to overwrite")
    if args.task == "depth":
        lines = [f"rmse={rmse_depth(pred, gt)!r}"]
    else:
        if gt.kind != CATEGORICAL:
            raise GridError("segmentation ground truth must be categorical")
        classes = [int(c) for c in args.classes.split(",")] if args.classes else list(range(gt.channels))
        ignore = None
        if args.ignore is not None:
            ignore = gt.classes() == args.ignore
        lines = [f"miou={miou(pred, gt, classes, ignore)!r}", "classes=" + ",".join(map(str, classes))]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    store = MemoryStore.load(args.store)
    config = _search_config(args)
    if args.full_beam:
        config = SearchConfig(phi=1.0, full_beam=True, top_k=args.k, kernel_mode=args.kernel, chunk=args.chunk, workers=args.threads)
    desc = store.config.extractor
    extractor = SyntheticExtractorConfig.from_description(desc) if desc.get("name") == "synthetic" else None
    lines = []
    mismatches = hits = total = 0
    for path in args.queries:
        q = _query_for(store, path)
        pyr = synth_extract(q, extractor) if not isinstance(q, FeaturePyramid) else q
        got = hierarchical_search(pyr, store, config)
        ref = exhaustive_oracle(pyr, store, got.k if args.full_beam else 1, args.kernel, args.max_pairs)
        if args.full_beam:
            bad = int(np.count_nonzero(
                (got.sample != ref.sample).any(1) | (got.node != ref.node).any(1) | (got.s != ref.s).any(1)
            ))
            mismatches += bad
            lines.append(f"{path.name} mismatched_nodes={bad}")
        else:
            hit = (got.sample[:, 0] == ref.sample[:, 0]) & (got.node[:, 0] == ref.node[:, 0])
            hits += int(hit.sum())
            total += hit.size
            lines.append(f"{path.name} recall@1={hit.mean()!r}")
    if args.full_beam:
        status = "PASS" if mismatches == 0 else "FAIL"
        lines.append(f"{status} mismatches={mismatches}")
    else:
        lines.append(f"REPORT recall@1={hits / total!r}")
        status = "PASS"
    print("\n".join(lines))
    if args.out is not None:
        out = _prepare_out(args.out, args.force)
        (out / "oracle_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _echo_config(out, args)
    if status == "FAIL":
        raise ValidationFailure(f"{mismatches} nodes differ from the oracle")
    return EXIT_OK


def cmd_cl_run(args) -> int:
    scenario = load_scenario(args.config, seed=args.seed)
    out = _prepare_out(args.out, args.force)
    cfg = scenario.config
    store = MemoryStore(n_sp=cfg.n_sp, extractor=cfg.extractor.describe())
    report = run_scenario(scenario.spec, store, scenario.stream(), cfg, n_steps=args.steps)
    (out / "retention.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "retention.kv").write_text(report.to_kv(), encoding="utf-8")
    (out / "scenario.ini").write_text(scenario.to_text(), encoding="utf-8")
    _echo_config(out, args)
    print(report.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for search")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="transduce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic shapes dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--classes", default="1,2,3")
    p.add_argument("--shapes", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-memory", parents=[common], help="consolidate labeled samples into a store")
    p.add_argument("out", type=Path)
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--labels", type=Path, nargs="+", required=True)
    p.add_argument("--n-sp", type=int, default=3)
    p.add_argument("--levels", type=int, default=4, help="pyramid levels for grid inputs")
    p.add_argument("--task", choices=["seg", "depth"], default="seg")
    p.set_defaults(func=cmd_build_memory)

    p = sub.add_parser("predict", parents=[common], help="predict labels for a query")
    p.add_argument("out", type=Path)
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--query", type=Path, required=True)
    _add_search_args(p)
    p.add_argument("--kappa", type=int, default=16)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=32)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--scales", default=",".join(str(s) for s in DEFAULT_SCALES))
    p.add_argument("--no-mp", action="store_true")
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--emit-diagnostics", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score a prediction against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--task", choices=["seg", "depth"], default="seg")
    p.add_argument("--classes", default=None, help="comma-separated class ids (default: all)")
    p.add_argument("--ignore", type=int, default=None, help="ground-truth class to ignore")
    p.add_argument("--out", type=Path, required=True, help="metrics file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check", parents=[common], help="compare beam search with exhaustive scoring")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--queries", type=Path, nargs="+", required=True)
    _add_search_args(p)
    p.add_argument("--full-beam", action="store_true", help="no pruning; must match the oracle exactly")
    p.add_argument("--k", type=int, default=1, help="matches compared per node with --full-beam")
    p.add_argument("--max-pairs", type=int, default=50_000_000)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("cl-run", parents=[common], help="run a continual-learning scenario")
    p.add_argument("out", type=Path)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None, help="run only the first N steps")
    p.set_defaults(func=cmd_cl_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is None and args.command != "cl-run":
        args.seed = 0
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ptns.PTNSFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GridError, ValueError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
