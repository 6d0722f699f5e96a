"""Command-line entry point: ``halide <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
Logs are JSON lines on stderr; every command writes ``<output>.manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import DataError, NumericalError, __version__
from ._util import content_hash, file_digest
from .dataset import apply_centering, center_states, load_dataset, write_dataset
from .evaluation import evaluate_grid, sibling_path, write_cd_csv, write_predictions, write_report_csv
from .pipeline import METHODS, RunConfig, TrainedModel, halide_fit, predict_dataset
from .policy import em_edm_fit
from .ranking import RankingRecord, rank_dataset
from .segmentation import ToeplitzClusterModel, cut_subtrajectories, rmt_ticc_fit
from .segmentation.ticc import SubTrajectory

log = logging.getLogger("halide")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                payload = {"msg": payload}
        except ValueError:
            payload = {"msg": msg}
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, **payload})


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("halide")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


# ----------------------------------------------------------------------- helpers


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None


def _load_config(path, seed: int | None) -> RunConfig:
    cfg = RunConfig() if path is None else RunConfig.from_dict(_read_json(path))
    if seed is not None:
        cfg.seed = seed
    return cfg


def _read_ranking(path) -> list[RankingRecord]:
    recs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                recs.append(RankingRecord(str(r["id"]), float(r["nlg"]), float(r["z"]),
                                          float(r["weight"]), str(r["qlg"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: line {lineno}: bad ranking record ({exc})") from None
    return recs


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def _ranking_for(d, path, cfg: RunConfig):
    if path is not None:
        return _read_ranking(path)
    if all(tr.pretest is not None and tr.posttest is not None for tr in d):
        return rank_dataset(d, cfg.alpha, cfg.groups)
    return None  # ranking bypassed: step weights from the data file


def _manifest(args, out: Path, inputs: dict, config_hash: str | None, seed, started: float) -> None:
    man = {
        "command": args.command,
        "version": __version__,
        "config_hash": config_hash,
        "seed": seed,
        "threads": args.threads,
        "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in inputs.items() if p is not None},
        "timing": {"started_unix": started, "duration_s": time.time() - started},
    }
    target = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    target.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------- commands


def cmd_rank(args):
    d = load_dataset(args.data)
    recs = rank_dataset(d, args.alpha, args.groups)
    _write_jsonl(args.out, [r.to_json() for r in recs])
    return {"data": args.data}, content_hash({"alpha": args.alpha, "groups": args.groups}), None


def cmd_segment(args):
    cfg = _load_config(args.config, args.seed)
    eff = cfg.effective()
    d = load_dataset(args.data)
    dc, mean = center_states(d)
    res = rmt_ticc_fit(dc, eff.seg, threads=args.threads)
    rows = [{"type": "segmentation", "config": eff.seg.to_dict(), "mean": mean.tolist(),
             "beta": res.beta, "tau": res.tau, "iterations": res.iterations,
             "converged": res.converged, "models": [m.to_json() for m in res.models]}]
    for tr in dc:
        segs = cut_subtrajectories(tr, res.assignments[tr.id])
        rows.append({"id": tr.id, "assignment": res.assignments[tr.id].tolist(),
                     "segments": [[s.start, s.end, s.high_state] for s in segs]})
    _write_jsonl(args.out, rows)
    return {"data": args.data, "config": args.config}, content_hash(eff.seg.to_dict()), cfg.seed


def _read_segmentation(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
    if not rows or rows[0].get("type") != "segmentation":
        raise DataError(f"{path}: line 1: missing segmentation header")
    return rows[0], {r["id"]: r for r in rows[1:]}


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    eff = cfg.effective()
    d = load_dataset(args.data)
    head, by_id = _read_segmentation(args.seg)
    mean = np.array(head["mean"], dtype=np.float64)
    recs = {r.id: r for r in _read_ranking(args.weights)} if args.weights else None
    dc = apply_centering(d, mean)
    segs = []
    for tr in dc:
        if tr.id not in by_id:
            raise DataError(f"{args.seg}: no segmentation for trajectory {tr.id!r}")
        if recs is not None and tr.id not in recs:
            raise DataError(f"{args.weights}: no record for trajectory {tr.id!r}")
        w = np.full(len(tr), recs[tr.id].weight) if recs is not None else tr.weights
        for start, end, q in by_id[tr.id]["segments"]:
            segs.append(SubTrajectory(tr.id, start, end, q, tr.states[start:end],
                                      tr.actions[start:end], w[start:end]))
    mix = em_edm_fit(segs, eff.em, d.state_dim, d.num_actions, args.threads,
                     unit_weights=eff.weight_axis == "uniform")
    cfg.seg = eff.seg.__class__.from_dict(head["config"])
    model = TrainedModel(cfg, d.state_dim, d.num_actions, mean, mix,
                         [ToeplitzClusterModel.from_json(m) for m in head["models"]],
                         float(head["beta"]), float(head["tau"]), None, list(d.ids),
                         [{"em_objective": mix.objective_history}])
    model.save(args.out)
    return {"data": args.data, "seg": args.seg, "weights": args.weights, "config": args.config}, cfg.hash(), cfg.seed


def cmd_fit(args):
    cfg = _load_config(args.config, args.seed)
    d = load_dataset(args.data)
    model = halide_fit(d, _ranking_for(d, args.weights, cfg), cfg, args.threads)
    model.save(args.out)
    return {"data": args.data, "weights": args.weights, "config": args.config}, cfg.hash(), cfg.seed


def cmd_predict(args):
    model = TrainedModel.load(args.model)
    d = load_dataset(args.data)
    write_predictions(args.out, predict_dataset(model, d))
    return {"model": args.model, "data": args.data}, model.config.hash(), model.config.seed


def cmd_eval(args):
    rep = evaluate_grid(args.preds, order=METHODS, alpha=args.alpha)
    write_report_csv(rep, args.out)
    if args.cd:
        if "f1" not in rep.tests:
            raise DataError("rank statistics need at least 2 methods and 2 folds")
        write_cd_csv(rep.tests["f1"], args.cd)
        write_cd_csv(rep.tests["jaccard"], sibling_path(args.cd, "jaccard"))
    return {}, None, None


def cmd_synth(args):
    from .synthetic import GeneratorSpec, generate
    spec = GeneratorSpec.from_dict(_read_json(args.spec)) if args.spec else GeneratorSpec()
    if args.seed is not None:
        spec.seed = args.seed
    d, truth = generate(spec)
    write_dataset(d, args.out)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth.to_json(), separators=(",", ":")) + "\n")
    return {"spec": args.spec}, content_hash(spec.to_dict()), spec.seed


def cmd_bench(args):
    from .bench import run_bench
    cfg = _load_config(args.config, args.seed)
    d = load_dataset(args.data)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    rep = run_bench(d, cfg, out, args.threads, args.methods)
    write_report_csv(rep, out / "report.csv")
    if "f1" in rep.tests:
        write_cd_csv(rep.tests["f1"], out / "cd.csv")
        write_cd_csv(rep.tests["jaccard"], out / "cd_jaccard.csv")
    return {"data": args.data, "config": args.config}, cfg.hash(), cfg.seed


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    common.add_argument("--version", action="version", version=f"halide {__version__}")

    p = _Parser(prog="halide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"halide {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    s = sub.add_parser("rank", parents=[common], help="learning-gain weights and expert labels")
    s.add_argument("--data", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--groups", default="terciles", help="terciles | fixed:c1,c2")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("segment", parents=[common], help="window clustering and sub-trajectory cuts")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("train", parents=[common], help="weighted EM over a fixed segmentation")
    s.add_argument("--data", required=True)
    s.add_argument("--seg", required=True)
    s.add_argument("--weights")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit", parents=[common], help="full outer loop for one configuration")
    s.add_argument("--data", required=True)
    s.add_argument("--weights")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="causal per-step action distributions")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="metric table and rank statistics")
    s.add_argument("--preds", required=True, help="directory with <method>/fold<k>.jsonl files")
    s.add_argument("--out", required=True)
    s.add_argument("--cd", help="F1 critical-difference CSV; Jaccard goes to <stem>_jaccard.csv")
    s.add_argument("--alpha", type=float, default=0.05)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="synthetic dataset with ground truth")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bench", parents=[common], help="baseline grid over temporal folds")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--outdir", required=True)
    s.add_argument("--methods", nargs="+", choices=METHODS)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("halide: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("halide: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.log_level)
    started = time.time()
    try:
        inputs, chash, seed = args.func(args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error(json.dumps({"event": "numerical_error", "error": str(exc)}))
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        log.error(json.dumps({"event": "data_error", "error": str(exc)}))
        return EXIT_DATA
    out = Path(args.outdir if args.command == "bench" else args.out)
    _manifest(args, out, inputs, chash, seed, started)
    log.info(json.dumps({"event": "done", "command": args.command,
                         "duration_s": round(time.time() - started, 3)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
