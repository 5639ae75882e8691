"""Command-line front end: ``satforge <command> [options]``.

Every command writes its resolved config (``config.ini``) and a
``manifest.json`` recording the invocation, so ``satforge rerun RUN_DIR``
reproduces the run's CSV files byte for byte.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from satforge import config as cfgmod
from satforge.backends import BACKENDS, evaluate_speaker_recognition
from satforge.conditioning import MECHANISM_ALIASES, MECHANISMS, ConditioningSpec, attach
from satforge.nn_core import NumericError
from satforge.serialization import FormatError, load_tensors, save_tensors, write_bytes_atomic
from satforge.synth_data import EMBEDDING_KINDS, gen_corpus, load_embedding_table, read_corpus, write_corpus
from satforge.trainer import (
    POLICIES,
    EmbeddingTransform,
    EvalReport,
    ExperimentResult,
    TrainingError,
    build_model,
    compare_experiments,
    eval_fer,
    fer_by_min_length,
    frame_set,
    run_fingerprint,
    train_sat,
    train_si,
)

log = logging.getLogger("satforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"
PATH_ARGS = ("config", "out", "corpus", "si_checkpoint", "run", "runs")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _mechanism(name: str) -> str:
    key = name.replace("-", "_")
    if name in MECHANISM_ALIASES:
        return MECHANISM_ALIASES[name]
    if key in MECHANISMS:
        return key
    raise argparse.ArgumentTypeError(f"unknown mechanism {name!r} (choose from {', '.join(sorted({*MECHANISMS, *MECHANISM_ALIASES}))})")


def _policy(name: str) -> str:
    key = name.replace("-", "_")
    if key not in POLICIES:
        raise argparse.ArgumentTypeError(f"unknown policy {name!r}")
    return key


def _site(text: str) -> str:
    if text in ("input", "all_hidden", "all-hidden", "hidden"):
        return "input" if text == "input" else "all_hidden"
    try:
        [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad site {text!r}: use input, hidden or comma-separated indices") from None
    return text


def spec_from_config(c: cfgmod.ConditioningConfig) -> ConditioningSpec:
    site: str | tuple[int, ...] = c.site
    if c.site not in ("input", "all_hidden"):
        site = tuple(int(p) for p in c.site.split(","))
    return ConditioningSpec(
        c.mechanism, site=site, mode=c.mode, activation=c.activation,
        shared_units=c.shared_units, use_skip=c.use_skip, constant=c.constant,
    )


def _load_config(path) -> cfgmod.ExperimentConfig:
    if path is None:
        return cfgmod.ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} not found")
    return cfgmod.load(p)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _invocation(args: argparse.Namespace) -> dict:
    inv = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "force", "verbose"):
            continue
        if k in PATH_ARGS and v is not None:
            v = [str(Path(x).resolve()) for x in v] if isinstance(v, list) else str(Path(v).resolve())
        inv[k] = list(v) if isinstance(v, tuple) else v
    return inv


def _write_run_files(out: Path, args, cfg: cfgmod.ExperimentConfig, **extra) -> None:
    text = cfgmod.dumps(cfg)
    log.info("resolved config:\n%s", text)
    write_bytes_atomic(out / "config.ini", text.encode())
    manifest = {"command": args.command, "invocation": _invocation(args), "config_fingerprint": cfg.fingerprint(),
                "corpus_seed": cfg.corpus.seed, "training_seed": cfg.training.seed, **extra}
    write_bytes_atomic(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(run_dir) -> dict:
    p = Path(run_dir) / MANIFEST
    if not p.exists():
        raise DataError(f"{run_dir} has no {MANIFEST}")
    return json.loads(p.read_text())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.4f}" if isinstance(x, float) else ("" if x is None else x) for x in r])
    return buf.getvalue()


def _write_csv(path: Path, header, rows) -> None:
    write_bytes_atomic(path, _csv_text(header, rows).encode())


def _open_corpus(corpus_dir, cfg: cfgmod.ExperimentConfig, check: bool = True):
    root = Path(corpus_dir)
    if not (root / "manifest.txt").exists():
        raise DataError(f"{root} is not a corpus directory (run gen-data first)")
    corpus = read_corpus(root)
    if check and corpus.fingerprint != cfg.corpus.fingerprint():
        raise DataError(
            f"corpus fingerprint {corpus.fingerprint} does not match config [corpus] "
            f"fingerprint {cfg.corpus.fingerprint()}; pass the config used for gen-data"
        )
    return corpus


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace("corpus", seed=args.seed)
    kinds = tuple(args.kinds) if args.kinds else cfg.embeddings.kinds_to_write
    cfg = cfg.replace("embeddings", kinds_to_write=kinds)
    out = Path(args.out)
    _prepare_out(out, args.force)
    corpus = gen_corpus(cfg.corpus)
    write_corpus(corpus, out, kinds)
    _write_run_files(out, args, cfg, corpus_fingerprint=corpus.fingerprint, utterances=len(corpus.utterances))
    log.info("wrote %d utterances to %s", len(corpus.utterances), out)
    return EXIT_OK


def _apply_train_overrides(cfg: cfgmod.ExperimentConfig, args) -> cfgmod.ExperimentConfig:
    cond = {k: v for k, v in (("mechanism", args.mechanism), ("mode", args.mode), ("site", args.site), ("policy", args.policy)) if v is not None}
    if cond:
        cfg = cfg.replace("conditioning", **cond)
    if args.embedding is not None:
        cfg = cfg.replace("embeddings", kind=args.embedding)
    if args.train_seed is not None:
        cfg = cfg.replace("training", seed=args.train_seed)
    return cfg


def model_for_run(cfg: cfgmod.ExperimentConfig, corpus, stage: str):
    """Rebuild the architecture a checkpoint of ``stage`` was saved from."""
    model = build_model(cfg.model, corpus.config.feat_dim, corpus.config.num_classes, cfg.training.seed)
    transform = None
    if stage == "sat":
        transform = EmbeddingTransform.fit(corpus, cfg.embeddings.kind, cfg.embeddings.pca_dim)
        model = attach(model, spec_from_config(cfg.conditioning), transform.dim, seed=cfg.training.seed + 7919)
    return model, transform


def _load_checkpoint(model, path) -> None:
    try:
        model.load_state(load_tensors(path))
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} does not fit the configured model: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _apply_train_overrides(_load_config(args.config), args)
    corpus = _open_corpus(args.corpus, cfg)
    out = Path(args.out)
    extra = {}
    if args.sat:
        if args.si_checkpoint is None:
            raise UsageError("train --sat needs --si-checkpoint")
        ckpt = Path(args.si_checkpoint)
        if ckpt.is_dir():
            ckpt = ckpt / "model.bin"
        if not ckpt.exists():
            raise DataError(f"SI checkpoint {ckpt} not found")
        si_manifest = ckpt.parent / MANIFEST
        if si_manifest.exists():
            m = json.loads(si_manifest.read_text())
            if m.get("corpus_fingerprint") not in (None, corpus.fingerprint):
                raise DataError(f"SI checkpoint was trained on corpus {m['corpus_fingerprint']}, not {corpus.fingerprint}")
        si_model, _ = model_for_run(cfg, corpus, "si")
        _load_checkpoint(si_model, ckpt)
        _prepare_out(out, args.force)
        spec = spec_from_config(cfg.conditioning)
        model, result = train_sat(
            si_model, corpus, spec, cfg.embeddings.kind, cfg.conditioning.policy,
            cfg.training, cfg.embeddings.pca_dim, name=args.name,
        )
        extra["si_checkpoint"] = str(ckpt.resolve())
    else:
        _prepare_out(out, args.force)
        model, result = train_si(corpus, cfg.model, cfg.training, name=args.name)
    save_tensors(out / "model.bin", model.state_dict())
    rows = result.rows(cfg.evaluation.min_lengths)
    _write_csv(out / "report.csv", ("experiment", "stage", "split", "threshold", "fer"), rows)
    _write_run_files(
        out, args, cfg, corpus_fingerprint=corpus.fingerprint, run_fingerprint=result.config_fingerprint,
        experiment=result.name, stage=result.stage, epochs_run=result.epochs_run,
        dev_history=[round(h, 6) for h in result.history], **extra,
    )
    print(f"{result.name}: dev FER {result.dev.fer_percent:.2f}%  eval FER {result.eval.fer_percent:.2f}%")
    return EXIT_OK


def cmd_eval_asr(args) -> int:
    run = Path(args.run)
    manifest = read_manifest(run)
    if manifest.get("command") != "train":
        raise DataError(f"{run} is not a training run")
    cfg = cfgmod.load(run / "config.ini")
    corpus = _open_corpus(args.corpus or manifest["invocation"]["corpus"], cfg)
    stage = manifest["stage"]
    model, transform = model_for_run(cfg, corpus, stage)
    _load_checkpoint(model, run / "model.bin")
    thresholds = tuple(args.min_length) if args.min_length else cfg.evaluation.min_lengths
    kind = cfg.embeddings.kind if stage == "sat" else None
    rows, curves = [], {}
    for split in ("dev", "eval"):
        data = frame_set(corpus, split, cfg.training.cmn, kind, transform)
        report = eval_fer(model, data, split)
        curve = fer_by_min_length(report, thresholds)
        curves[f"{manifest['experiment']} ({split})"] = curve
        for thr, fer in sorted(curve.items()):
            n = sum(1 for v in report.per_utterance.values() if v[2] >= thr)
            rows.append((manifest["experiment"], split, float(thr), fer, n))
    out = Path(args.out) if args.out else run
    if args.out:
        _prepare_out(out, args.force)
        _write_run_files(out, args, cfg, corpus_fingerprint=corpus.fingerprint, experiment=manifest["experiment"])
    _write_csv(out / "fer_by_length.csv", ("experiment", "split", "threshold", "fer", "utterances"), rows)
    from satforge.plotting import plot_fer_curves

    plot_fer_curves(curves, out / "fer_by_length.png")
    for r in rows:
        print(f"{r[1]} min_len {r[2]:.2f}s: FER {r[3]:.2f}% over {r[4]} utterances")
    return EXIT_OK


def cmd_eval_spk(args) -> int:
    cfg = _load_config(args.config)
    ev = {}
    if args.backend:
        ev["backends"] = tuple(args.backend)
    if args.min_length:
        ev["min_lengths"] = tuple(float(x) for x in args.min_length)
    if args.subset_max_sec is not None:
        ev["subset_max_sec"] = float(args.subset_max_sec)
    if ev:
        cfg = cfg.replace("evaluation", **ev)
    kind = args.embedding or cfg.embeddings.kind
    if kind == "oracle_frame":
        raise UsageError("speaker evaluation needs utterance-level embeddings")
    cfg = cfg.replace("embeddings", kind=kind)
    corpus = _open_corpus(args.corpus, cfg)
    try:
        embs = load_embedding_table(args.corpus, kind)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    ecfg = cfg.evaluation
    res = evaluate_speaker_recognition(
        corpus, kind, ecfg.backends, min_lengths=ecfg.min_lengths, subset_max_sec=ecfg.subset_max_sec,
        lda_dim=ecfg.lda_dim, pca_dim=ecfg.spk_pca_dim, non_target_prop=ecfg.non_target_prop,
        seed=cfg.training.seed, embeddings=embs,
    )
    out = Path(args.out)
    _prepare_out(out, args.force)
    write_bytes_atomic(out / "trials.txt", ("\n".join(res.trials.lines()) + "\n").encode())
    for name, scores in res.scores.items():
        lines = [f"{e} {t} {s:.6f}" for (e, t, _), s in zip(res.trials.trials, scores)]
        write_bytes_atomic(out / "scores" / f"{name}.txt", ("\n".join(lines) + "\n").encode())
    rows = [(kind, res.task, b, float(thr), v) for b in ecfg.backends for thr, v in sorted(res.by_length[b].items())]
    _write_csv(out / "eer.csv", ("embedding", "task", "backend", "threshold", "eer"), rows)
    from satforge.plotting import plot_eer_curves

    plot_eer_curves({f"{kind}/{b}": res.by_length[b] for b in ecfg.backends}, out / "eer_by_length.png")
    _write_run_files(out, args, cfg, corpus_fingerprint=corpus.fingerprint, embedding=kind, task=res.task,
                     trials=len(res.trials), excluded=res.excluded)
    for b in ecfg.backends:
        print(f"{kind} {res.task} {b}: EER {res.eer[b]:.2f}%")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    manifests = [(r, read_manifest(r)) for r in runs]
    fps = {m.get("corpus_fingerprint") for _, m in manifests}
    if len(fps) != 1:
        raise DataError(f"refusing to merge runs from different corpora: {sorted(str(f) for f in fps)}")
    corpus_fp = fps.pop()
    results, fer_curves, eer_rows = [], {}, []
    for run, m in manifests:
        if m["command"] == "train":
            rows = _read_csv(run / "report.csv")
            dev = next(float(r["fer"]) for r in rows if r["split"] == "dev")
            ev = [r for r in rows if r["split"] == "eval"]
            ev0 = next(float(r["fer"]) for r in ev if float(r["threshold"]) == 0.0)
            name = m["experiment"]
            results.append(ExperimentResult(name, m["stage"], corpus_fp, m["run_fingerprint"],
                                            EvalReport("dev", dev, {}), EvalReport("eval", ev0, {})))
            fer_curves[name] = {float(r["threshold"]): float(r["fer"]) for r in ev}
        elif m["command"] == "eval-spk":
            eer_rows += _read_csv(run / "eer.csv")
        else:
            raise DataError(f"{run}: cannot report on a {m['command']} run")
    names = [r.name for r in results]
    if len(set(names)) != len(names):
        raise DataError("duplicate experiment names among runs; rename with train --name")
    if args.baseline and args.baseline not in names:
        raise DataError(f"baseline {args.baseline!r} not among runs")
    baseline = args.baseline or next((n for n in names if n in ("si-cmn", "si")), None)
    out = Path(args.out)
    _prepare_out(out, args.force)
    from satforge import plotting

    written = []
    if results:
        table = compare_experiments(results, baseline)
        _write_csv(out / "asr_table.csv", ("experiment", "stage", "dev_fer", "eval_fer", "rel_gain"),
                   [(r["experiment"], r["stage"], r["dev_fer"], r["eval_fer"], r["rel_gain"]) for r in table])
        curve_rows = [(n, thr, fer) for n in sorted(fer_curves) for thr, fer in sorted(fer_curves[n].items())]
        _write_csv(out / "fer_curves.csv", ("experiment", "threshold", "fer"), curve_rows)
        plotting.plot_comparison({r["experiment"]: r["eval_fer"] for r in table}, out / "asr_comparison.png", baseline=baseline)
        plotting.plot_fer_curves(fer_curves, out / "fer_curves.png")
        written += ["asr_table.csv", "fer_curves.csv"]
    if eer_rows:
        key = lambda r: (r["embedding"], r["task"], r["backend"], float(r["threshold"]))  # noqa: E731
        eer_rows = sorted({key(r): r for r in eer_rows}.values(), key=key)
        table = [(r["embedding"], r["task"], r["backend"], float(r["eer"])) for r in eer_rows if float(r["threshold"]) == 0.0]
        _write_csv(out / "eer_table.csv", ("embedding", "task", "backend", "eer"), table)
        _write_csv(out / "eer_curves.csv", ("embedding", "task", "backend", "threshold", "eer"),
                   [(r["embedding"], r["task"], r["backend"], float(r["threshold"]), float(r["eer"])) for r in eer_rows])
        curves: dict[str, dict[float, float]] = {}
        for r in eer_rows:
            curves.setdefault(f"{r['embedding']}/{r['task']}/{r['backend']}", {})[float(r["threshold"])] = float(r["eer"])
        plotting.plot_eer_curves(curves, out / "eer_curves.png")
        written += ["eer_table.csv", "eer_curves.csv"]
    manifest = {"command": "report", "invocation": _invocation(args), "corpus_fingerprint": corpus_fp, "files": written}
    write_bytes_atomic(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    for f in written:
        print(out / f)
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Replay a run from its manifest and saved config into a new directory."""
    src = Path(args.run)
    m = read_manifest(src)
    inv = dict(m["invocation"])
    if "config" in inv and (src / "config.ini").exists():
        inv["config"] = str((src / "config.ini").resolve())
    inv["out"] = str(Path(args.out).resolve())
    ns = argparse.Namespace(**inv, force=args.force, verbose=args.verbose)
    ns.func = COMMANDS[m["command"]]
    return ns.func(ns)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-asr": cmd_eval_asr,
    "eval-spk": cmd_eval_spk,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="satforge", description="Embedding-conditioned frame classifiers on a synthetic corpus.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a corpus and oracle embedding tables")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override [corpus] seed")
    g.add_argument("--kinds", nargs="+", choices=EMBEDDING_KINDS, help="embedding tables to write")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an SI model or a SAT model on top of one")
    mode = t.add_mutually_exclusive_group(required=True)
    mode.add_argument("--si", action="store_true")
    mode.add_argument("--sat", action="store_true")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--si-checkpoint", help="model.bin (or its run dir) from train --si")
    t.add_argument("--mechanism", type=_mechanism)
    t.add_argument("--mode", choices=("shift", "scale", "both"))
    t.add_argument("--site", type=_site, help="input, hidden, or comma-separated site indices")
    t.add_argument("--policy", type=_policy, help="fine-tune-all or freeze-main")
    t.add_argument("--embedding", choices=EMBEDDING_KINDS)
    t.add_argument("--train-seed", type=int)
    t.add_argument("--name", help="experiment name used in reports")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("eval-asr", help="FER of a trained run, swept over minimum utterance length")
    a.add_argument("--run", required=True)
    a.add_argument("--corpus", help="defaults to the corpus the run was trained on")
    a.add_argument("--min-length", type=float, nargs="+")
    a.add_argument("--out", help="write results here instead of into the run dir")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_eval_asr)

    s = sub.add_parser("eval-spk", help="speaker verification EER for one embedding kind")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--embedding", choices=[k for k in EMBEDDING_KINDS if k != "oracle_frame"])
    s.add_argument("--backend", nargs="+", choices=BACKENDS)
    s.add_argument("--min-length", type=float, nargs="+")
    s.add_argument("--subset-max-sec", type=float)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_eval_spk)

    r = sub.add_parser("report", help="merge runs into comparison tables, curves and figures")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--baseline", help="experiment name for the relative-gain column")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)

    rr = sub.add_parser("rerun", help="replay a run from its manifest into a new directory")
    rr.add_argument("run")
    rr.add_argument("--out", required=True)
    rr.add_argument("--force", action="store_true")
    rr.set_defaults(func=cmd_rerun)
    return p


def _threads() -> int:
    raw = os.environ.get("SATFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SATFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SATFORGE_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors (and --help) this way
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"satforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"satforge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, cfgmod.ConfigError, FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"satforge: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
