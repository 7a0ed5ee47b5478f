"""Command-line interface.

Exit status is 0 on success, 1 on usage errors and 2 on data or contract
errors.  Logs go to standard error; results go to files or standard output.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import io as dio
from .calibration import apply_calibration
from .core import MULTILABEL, POWERSET, DiacalError
from .datagen import GeneratorConfig, generate
from .evaluation import (
    Annotation,
    DERReport,
    bce_sum,
    compute_der,
    frame_targets,
    report_csv,
    report_table,
)
from .fusion import METHODS, FusionInput, fuse
from .pipeline import (
    CALIBRATE_THEN_FUSE,
    FUSE_THEN_CALIBRATE,
    PipelineConfig,
    Recording,
    apply_pipeline,
    fit_pipeline,
    prepare_systems,
    run_experiment,
    score_output,
)
from .spaces import to_space

log = logging.getLogger("diacal")

SPACE_CHOICES = {"mult": MULTILABEL, "power": POWERSET, MULTILABEL: MULTILABEL, POWERSET: POWERSET}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    """Options accepted both before and after the subcommand."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=d(None), help="data config (JSON)")
    g.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    g.add_argument("--collar", type=float, default=d(0.25), help="DER collar in seconds (default 0.25)")
    g.add_argument("--no-overlap-scoring", action="store_true", default=d(False),
                   help="exclude overlapped reference speech from DER")
    g.add_argument("--threshold", type=float, default=d(None), help="decision threshold (default 0.5)")
    g.add_argument("--median-window", type=int, default=d(None), help="median filter frames (default 11)")
    g.add_argument("--upsample", type=int, default=d(None), help="upsampling factor (default 10)")
    g.add_argument("--epsilon", type=float, default=d(None), help="probability clamp (default 1e-7)")
    g.add_argument("--out", default=d(None), help="output directory")
    g.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diacal", description="Calibrate and fuse diarization system outputs.")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def leaf(container, name, help_text):
        p = container.add_parser(name, help=help_text, description=help_text)
        _global_options(p, suppress=True)
        return p

    def fit_options(p):
        p.add_argument("--l2-c", type=float, default=1.0, help="inverse L2 strength (default 1.0)")
        p.add_argument("--max-iter", type=int, default=1000)

    p = leaf(sub, "fit-cal", "fit a calibration model on one system's score files")
    p.add_argument("--scores", nargs="+", required=True, help="score files, one per recording")
    p.add_argument("--ref", required=True, help="reference RTTM")
    p.add_argument("--space", choices=("mult", "power"), default="power")
    p.add_argument("--strategy", choices=("independent", "joint"), default="joint")
    p.add_argument("--feature", choices=("log", "logit"), default="log")
    p.add_argument("--model", help="output model path (default OUT/calibration.json)")
    fit_options(p)
    p.set_defaults(func=cmd_fit_cal)

    p = leaf(sub, "apply-cal", "apply a calibration model to score files")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", nargs="+", required=True)
    p.set_defaults(func=cmd_apply_cal)

    p = leaf(sub, "fuse", "fuse several systems' scores for one recording")
    p.add_argument("--scores", nargs="+", required=True, help="one score file per system")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--space", choices=("mult", "power"), default="mult")
    p.add_argument("--model", help="metalearner model (metalearner method only)")
    p.add_argument("--output", help="fused score file (default OUT/fused.txt)")
    p.set_defaults(func=cmd_fuse)

    p = leaf(sub, "fit-meta", "fit a metalearner on several systems")
    p.add_argument("--system", nargs="+", action="append", required=True, metavar=("ID", "FILE"),
                   help="system id followed by its score files; repeat per system")
    p.add_argument("--ref", required=True)
    p.add_argument("--space", choices=("mult", "power"), default="mult")
    p.add_argument("--model", help="output model path (default OUT/metalearner.json)")
    fit_options(p)
    p.set_defaults(func=cmd_fit_meta)

    p = leaf(sub, "pipeline", "fit or apply a calibration/fusion pipeline")
    psub = p.add_subparsers(dest="action", metavar="ACTION", required=True)
    q = leaf(psub, "fit", "fit a pipeline config from the data config")
    q.add_argument("--pipeline", help="config name (default: the first)")
    q.add_argument("--split", default="train", help="recording list to train on (default train)")
    q.add_argument("--model", help="output model path (default OUT/pipeline.json)")
    q.set_defaults(func=cmd_pipeline_fit)
    q = leaf(psub, "apply", "apply a fitted pipeline and write hypotheses")
    q.add_argument("--model", required=True)
    q.add_argument("--split", default="test", help="recording list to process (default test)")
    q.add_argument("--write-scores", action="store_true", help="also write output probabilities")
    q.set_defaults(func=cmd_pipeline_apply)

    p = leaf(sub, "score", "score hypotheses against a reference")
    ssub = p.add_subparsers(dest="action", metavar="METRIC", required=True)
    q = leaf(ssub, "der", "diarization error rate")
    q.add_argument("--ref", required=True)
    q.add_argument("--hyp", required=True)
    q.add_argument("--json", action="store_true", help="print a JSON report")
    q.add_argument("--per-recording", action="store_true", help="also print one line per recording")
    q.set_defaults(func=cmd_score_der)
    q = leaf(ssub, "bce", "binary cross-entropy of score files")
    q.add_argument("--ref", required=True)
    q.add_argument("--scores", nargs="+", required=True)
    q.set_defaults(func=cmd_score_bce)

    p = leaf(sub, "synth", "generate a synthetic benchmark")
    p.add_argument("--recordings", type=int, default=None, help="default 100")
    p.add_argument("--frames", type=int, default=None, help="frames per recording (default 3000)")
    p.add_argument("--speakers", type=int, default=None, help="default 2")
    p.add_argument("--gen-config", help="generator settings (JSON)")
    p.set_defaults(func=cmd_synth)

    p = leaf(sub, "report", "fit and evaluate every config of the data config")
    p.add_argument("--pipeline", nargs="*", help="restrict to these config names")
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------- helpers

def _out_path(args, default_name: str, explicit: str | None = None) -> str:
    if explicit:
        return explicit
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, default_name)


def _require_config(args) -> dio.DataConfig:
    if not args.config:
        raise UsageError("this command needs --config")
    return dio.DataConfig.load(args.config)


def _override(cfg: PipelineConfig, args) -> PipelineConfig:
    post = cfg.post
    changes = {}
    for flag, name in (("threshold", "threshold"), ("median_window", "median_window"),
                       ("upsample", "upsample_factor")):
        value = getattr(args, flag)
        if value is not None:
            changes[name] = value
    if changes:
        post = dataclasses.replace(post, **changes)
    d = dataclasses.replace(cfg, post=post)
    if args.epsilon is not None:
        d = dataclasses.replace(d, epsilon=args.epsilon)
    return d


def _epsilon(args) -> float:
    return 1e-7 if args.epsilon is None else args.epsilon


def _references(path) -> dict[str, Annotation]:
    return {a.recording_id: a for a in dio.read_rttm(path)}


def _load_system_files(files, refs=None, system: str | None = None) -> list[Recording]:
    recs = []
    for path in files:
        header, m = dio.load_scores(path)
        rec_id = header.recording or os.path.splitext(os.path.basename(path))[0]
        sys_id = system or header.system or "sys0"
        ann = None
        if refs is not None:
            ann = refs.get(rec_id, Annotation(rec_id))
        recs.append(Recording(rec_id, {sys_id: m.replace(recording_id=rec_id)}, ann))
    return recs


def _print_der(report: DERReport, label: str = "DER") -> None:
    print(f"{label} {report.der_pct:.3f}  miss {report.miss_pct:.3f}  FA {report.false_alarm_pct:.3f}  "
          f"conf {report.confusion_pct:.3f}  scored {report.scored_speech_s:.3f}s")


# ---------------------------------------------------------------- commands

def cmd_fit_cal(args) -> int:
    refs = _references(args.ref)
    recs = _load_system_files(args.scores, refs, system="input")
    cfg = PipelineConfig(
        name="fit-cal", fusion_method="none", calibrate=True,
        calibration_space=SPACE_CHOICES[args.space], calibration_strategy=args.strategy,
        feature=args.feature, l2_c=args.l2_c, max_iter=args.max_iter, epsilon=_epsilon(args))
    model = fit_pipeline(cfg, recs).calibration_models[0]
    path = _out_path(args, "calibration.json", args.model)
    dio.save_model(model, path)
    frames = sum(r.systems["input"].num_frames for r in recs)
    print(f"{model.strategy}: {len(recs)} recordings, {frames} frames, "
          f"training cross-entropy {model.diagnostics.get('cross_entropy', float('nan')):.6f}")
    log.info("wrote %s", path)
    return 0


def cmd_apply_cal(args) -> int:
    model = dio.load_calibration(args.model)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    for path in args.scores:
        header, m = dio.load_scores(path)
        target = os.path.join(out, os.path.basename(path))
        if os.path.abspath(target) == os.path.abspath(path):
            raise UsageError(f"refusing to overwrite input {path}; choose another --out")
        cal = apply_calibration(model, to_space(m, model.space))
        dio.write_scores(cal, target, header.system)
        log.info("wrote %s", target)
    return 0


def cmd_fuse(args) -> int:
    loaded = [dio.load_scores(p) for p in args.scores]
    ids = [h.system or f"sys{i}" for i, (h, _) in enumerate(loaded)]
    if len(set(ids)) != len(ids):
        raise DiacalError(f"duplicate system ids {ids}")
    rec_ids = {m.recording_id for _, m in loaded}
    if len(rec_ids) > 1:
        raise DiacalError(f"score files belong to different recordings {sorted(rec_ids)}")
    rec = Recording(rec_ids.pop(), {i: m for i, (_, m) in zip(ids, loaded)})
    model = None
    if args.method == "metalearner":
        if not args.model:
            raise UsageError("--model is required for the metalearner method")
        model = dio.load_metalearner(args.model)
        if model.system_ids != ids:
            raise DiacalError(f"metalearner expects systems {model.system_ids}, got {ids}")
    systems, perms = prepare_systems(rec, ids)
    space = SPACE_CHOICES[args.space]
    inputs = FusionInput([to_space(m, space) for m in systems], ids, _epsilon(args))
    fused = fuse(args.method, inputs, model)
    path = _out_path(args, "fused.txt", args.output)
    dio.write_scores(fused, path, "fused")
    for i, perm in zip(ids, perms):
        log.info("%s speaker order %s", i, perm)
    log.info("wrote %s", path)
    return 0


def cmd_fit_meta(args) -> int:
    refs = _references(args.ref)
    per_system = {}
    for group in args.system:
        if len(group) < 2:
            raise UsageError("--system takes an id followed by at least one score file")
        per_system[group[0]] = {r.recording_id: r for r in _load_system_files(group[1:], refs, group[0])}
    ids = list(per_system)
    rec_ids = list(per_system[ids[0]])
    recs = []
    for rec_id in rec_ids:
        systems = {}
        for sys_id in ids:
            if rec_id not in per_system[sys_id]:
                raise DiacalError(f"system {sys_id} has no scores for {rec_id}")
            systems[sys_id] = per_system[sys_id][rec_id].systems[sys_id]
        recs.append(Recording(rec_id, systems, per_system[ids[0]][rec_id].annotation))
    cfg = PipelineConfig(name="fit-meta", fusion_method="metalearner", calibrate=False,
                         fusion_space=SPACE_CHOICES[args.space], l2_c=args.l2_c,
                         max_iter=args.max_iter, epsilon=_epsilon(args))
    model = fit_pipeline(cfg, recs).metalearner
    path = _out_path(args, "metalearner.json", args.model)
    dio.save_model(model, path)
    print(f"metalearner ({model.space}, systems {','.join(ids)}): {len(recs)} recordings, "
          f"training cross-entropy {model.training_loss:.6f}")
    log.info("wrote %s", path)
    return 0


def cmd_pipeline_fit(args) -> int:
    data = _require_config(args)
    if args.pipeline is None and len(data.configs) > 1:
        log.info("no --pipeline given; using the first config %r", data.configs[0].name)
        cfg = data.configs[0]
    else:
        cfg = data.config(args.pipeline)
    cfg = _override(cfg, args)
    train = data.load_recordings(args.split, need_reference=True)
    tp = fit_pipeline(cfg, train)
    path = _out_path(args, "pipeline.json", args.model)
    dio.save_model(tp, path)
    print(f"{cfg.name}: {len(tp.calibration_models)} calibration model(s), "
          f"metalearner {'yes' if tp.metalearner else 'no'}, {len(train)} training recordings")
    log.info("wrote %s", path)
    return 0


def cmd_pipeline_apply(args) -> int:
    data = _require_config(args)
    tp = dio.load_pipeline(args.model)
    tp = dataclasses.replace(tp, config=_override(tp.config, args))
    recs = data.load_recordings(args.split)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    hyps, reports, total, count = [], [], 0.0, 0
    for rec in recs:
        res = apply_pipeline(tp, rec)
        hyps.append(res.hypothesis)
        if args.write_scores:
            os.makedirs(os.path.join(out, "scores"), exist_ok=True)
            dio.write_scores(res.probs, os.path.join(out, "scores", f"{rec.recording_id}.txt"),
                             tp.config.name.replace(" ", "_").replace("/", "_"))
        if rec.annotation is not None and rec.annotation.segments:
            score = score_output(res, rec.annotation, args.collar, not args.no_overlap_scoring)
            reports.append(score.der)
            total += score.bce_total
            count += score.bce_count
    path = os.path.join(out, "hyp.rttm")
    dio.write_rttm(hyps, path)
    log.info("wrote %s", path)
    if reports:
        _print_der(DERReport.combine(reports))
        print(f"BCE {total / count:.6f}")
    return 0


def cmd_score_der(args) -> int:
    refs = dio.read_rttm(args.ref)
    hyps = _references(args.hyp)
    extra = sorted(set(hyps) - {r.recording_id for r in refs})
    if extra:
        log.warning("hypothesis recordings without reference are ignored: %s", extra)
    if not refs:
        raise DiacalError(f"{args.ref} holds no reference speech")
    reports = []
    rows = []
    for ref in refs:
        hyp = hyps.get(ref.recording_id, Annotation(ref.recording_id))
        r = compute_der(ref, hyp, args.collar, not args.no_overlap_scoring)
        reports.append(r)
        rows.append((ref.recording_id, r))
    total = DERReport.combine(reports)
    if args.json:
        doc = {"collar_s": args.collar, "score_overlap": not args.no_overlap_scoring,
               "total": total.as_dict(),
               "recordings": {rid: r.as_dict() for rid, r in rows}}
        print(json.dumps(doc, indent=2))
    else:
        if args.per_recording:
            for rid, r in rows:
                _print_der(r, f"{rid}: DER")
        _print_der(total)
    return 0


def cmd_score_bce(args) -> int:
    refs = _references(args.ref)
    total, count = 0.0, 0
    eps = _epsilon(args)
    for path in args.scores:
        header, m = dio.load_scores(path)
        ref = refs.get(m.recording_id, Annotation(m.recording_id))
        targets = frame_targets(ref, m.frame_rate_hz, m.num_frames)
        t, c = bce_sum(m, targets, epsilon=eps)
        if len(args.scores) > 1:
            print(f"{m.recording_id}: BCE {t / c:.6f}")
        total += t
        count += c
    print(f"BCE {total / count:.6f}")
    return 0


def default_grid(system_ids: list[str]) -> list[PipelineConfig]:
    """Benchmark configs: single systems, then every fusion method in both orders."""
    grid = [PipelineConfig(order=FUSE_THEN_CALIBRATE, fusion_method="dynamic_logits")]
    for s in system_ids:
        grid.append(PipelineConfig(fusion_method="none", calibrate=False, systems=[s]))
        grid.append(PipelineConfig(fusion_method="none", systems=[s]))
    for order in (CALIBRATE_THEN_FUSE, FUSE_THEN_CALIBRATE):
        for method in METHODS:
            cfg = PipelineConfig(order=order, fusion_method=method)
            if cfg.name != grid[0].name:
                grid.append(cfg)
    return grid


def cmd_synth(args) -> int:
    if not args.out:
        raise UsageError("synth needs --out")
    doc = {}
    if args.gen_config:
        with open(args.gen_config, encoding="utf-8") as f:
            doc = json.load(f)
    for flag, key in (("recordings", "num_recordings"), ("frames", "num_frames"),
                      ("speakers", "num_speakers")):
        if getattr(args, flag) is not None:
            doc[key] = getattr(args, flag)
    doc["seed"] = args.seed
    gen = GeneratorConfig(**doc)
    out = args.out
    os.makedirs(out, exist_ok=True)
    recs = generate(gen)
    systems = {s: {} for s in gen.system_ids}
    for rec in recs:
        for sys_id, m in rec.systems.items():
            rel = f"scores/{sys_id}/{rec.recording_id}.txt"
            os.makedirs(os.path.join(out, "scores", sys_id), exist_ok=True)
            dio.write_scores(m, os.path.join(out, rel), sys_id)
            systems[sys_id][rec.recording_id] = rel
    dio.write_rttm([r.annotation for r in recs], os.path.join(out, "ref.rttm"))
    dio.dump_json(gen.to_dict(), os.path.join(out, "generator.json"))
    ids = [r.recording_id for r in recs]
    half = len(ids) // 2
    data = dio.DataConfig(systems, "ref.rttm", default_grid(gen.system_ids), ids[:half], ids[half:])
    dio.dump_json(data.to_dict(), os.path.join(out, "data.json"))
    print(f"wrote {len(recs)} recordings x {len(gen.systems)} systems to {out}")
    return 0


def cmd_report(args) -> int:
    data = _require_config(args)
    grid = data.configs
    if args.pipeline:
        grid = [data.config(n) for n in args.pipeline]
    grid = [_override(c, args) for c in grid]
    train = data.load_recordings(args.train_split, need_reference=True)
    test = data.load_recordings(args.test_split, need_reference=True)
    results = run_experiment(grid, train, test, args.collar, not args.no_overlap_scoring)
    table = report_table(results)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(table + "\n")
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8", newline="") as f:
            f.write(report_csv(results))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("diacal")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"diacal: error: {exc}", file=sys.stderr)
        return 1
    except (DiacalError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
