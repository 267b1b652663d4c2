"""Command-line entry point: ``emocat <subcommand> [flags]``."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from emocat.config import ConfigError, RunConfig, load_config
from emocat.corpus import (CLASS_NAMES, FeatureFileError, generate_corpus, parse_target, read_corpus,
                           read_features, split_heldout, write_corpus, write_features)
from emocat.model import Checkpoint, CheckpointError
from emocat.train import TrainingDiverged

log = logging.getLogger("emocat")

EXIT_INVARIANT = 1
EXIT_DIVERGED = 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    pass


def _setup_logging():
    name = os.environ.get("EMOCAT_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise CliError(f"EMOCAT_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    if not args.out:
        raise CliError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args):
    overrides = {"model": {}, "corpus": {}, "train": {}, "transform": {}}
    if args.seed is not None:
        overrides["corpus" if args.command == "synth-data" else "train"]["seed"] = args.seed
    if args.steps is not None:
        key = {"fine-tune": "fine_tune_steps"}.get(args.command, "main_steps")
        if args.command not in ("probe", "gradcheck"):
            overrides["train"][key] = args.steps
    if args.transform is not None:
        overrides["transform"]["kind"] = args.transform
    if args.lam is not None:
        overrides["transform"]["lam"] = repr(args.lam)
    if args.classifier is not None:
        overrides["model"]["classifier_kind"] = args.classifier
    return load_config(args.config, overrides)


def _corpus(args, run):
    if args.inp:
        return read_corpus(args.inp)
    log.info("no --in corpus given; generating one from the [corpus] settings")
    return generate_corpus(run.corpus)


def _load_ckpt(args):
    if not args.ckpt:
        raise CliError(f"{args.command} needs --ckpt")
    return Checkpoint.load(args.ckpt)


# ------------------------------------------------------------------ subcommands


def cmd_synth_data(args, run):
    out = _out_dir(args)
    records = generate_corpus(run.corpus)
    write_corpus(records, out, run.corpus)
    (out / "config.ini").write_text(run.to_ini())
    log.info("wrote %d utterances to %s", len(records), out)
    return 0


def _train_and_save(run, records, out, plan=None):
    from emocat.evaluate import heldout_l1
    from emocat.model import EmoCatNet
    from emocat.train import train

    plan = plan or run.train
    train_recs, test = split_heldout(records, plan.heldout, plan.target_language)
    initial = heldout_l1(Checkpoint(run.model, EmoCatNet(run.model).params.state()), test) if test else None
    try:
        ckpt, _ = train(run.model, plan, train_recs, out / "metrics.csv")
    except TrainingDiverged as err:
        err.checkpoint.save(out / "checkpoint.last-good.bin")
        raise
    ckpt.save(out / "checkpoint.bin")
    report = {"steps": ckpt.step, "heldout_l1_initial": initial,
              "heldout_l1_final": heldout_l1(ckpt, test) if test else None}
    _write_json(out / "train.json", report)
    return ckpt, report


def cmd_train(args, run):
    out = _out_dir(args)
    (out / "config.ini").write_text(run.to_ini())
    _, report = _train_and_save(run, _corpus(args, run), out)
    log.info("held-out L1 %s -> %s", report["heldout_l1_initial"], report["heldout_l1_final"])
    return 0


def cmd_fine_tune(args, run):
    from emocat.train import fine_tune

    out = _out_dir(args)
    (out / "config.ini").write_text(run.to_ini())
    ckpt = _load_ckpt(args)
    train_recs, _ = split_heldout(_corpus(args, run), run.train.heldout, run.train.target_language)
    try:
        tuned = fine_tune(ckpt, run.train, train_recs, out / "metrics.csv")
    except TrainingDiverged as err:
        err.checkpoint.save(out / "checkpoint.last-good.bin")
        raise
    tuned.save(out / "checkpoint.bin")
    return 0


def _manifest_entry(feature_path):
    """Look up an utterance in the manifest of the corpus directory holding it."""
    path = Path(feature_path).resolve()
    for root in (path.parent, path.parent.parent):
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            continue
        with open(manifest) as fh:
            for line in fh:
                row = json.loads(line)
                if (root / row["features"]).resolve() == path:
                    return row
    return None


def cmd_convert(args, run):
    from emocat.corpus import UtteranceRecord

    if not (args.inp and args.target and args.out):
        raise CliError("convert needs --ckpt, --in, --target and --out")
    ckpt = _load_ckpt(args)
    ckpt.require_centroids()
    try:
        target = parse_target(args.target)
    except ValueError as err:
        raise CliError(str(err)) from None
    features = read_features(args.inp)
    row = _manifest_entry(args.inp)
    if row is None:
        raise CliError(f"{args.inp}: no manifest.jsonl next to the file lists its phoneme ids")
    phonemes = np.asarray(row["phoneme_ids"], dtype=np.int64)
    if len(phonemes) != features.shape[0]:
        raise CliError(f"{args.inp}: {features.shape[0]} frames but {len(phonemes)} phoneme ids")
    record = UtteranceRecord(row["id"], row["language"], row["emotion_class"], row["intensity"],
                             features, phonemes, np.asarray(row["embedding"], dtype=np.float64))
    out = ckpt.network().convert(record, target, ckpt.centroids)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_features(args.out, out)
    log.info("converted %s to %s", row["id"], CLASS_NAMES[target])
    return 0


def cmd_probe(args, run):
    from emocat.evaluate import checkpoint_digest, probe_leakage

    out = _out_dir(args)
    ckpt = _load_ckpt(args)
    train_recs, _ = split_heldout(_corpus(args, run), run.train.heldout, run.train.target_language)
    before = checkpoint_digest(ckpt)
    steps = args.steps if args.steps is not None else 2000
    report = probe_leakage(ckpt, train_recs, args.probe, steps=steps, seed=run.train.seed, source=args.source,
                           standardize=args.standardize)
    if checkpoint_digest(ckpt) != before:
        raise CliError("probing modified the checkpoint")
    _write_json(out / "probe.json", report.to_dict())
    log.info("probe accuracy %.3f (majority baseline %.3f, majority rate %.3f)", report.accuracy,
             report.majority_class_baseline, report.majority_prediction_rate)
    return 0


def cmd_eval(args, run):
    from emocat.evaluate import eval_conversion, heldout_l1, intensity_ordering

    out = _out_dir(args)
    ckpt = _load_ckpt(args)
    _, test = split_heldout(_corpus(args, run), run.train.heldout, run.train.target_language)
    if not test:
        raise CliError("no held-out neutral utterances to convert")
    report = eval_conversion(ckpt, test, run.corpus)
    _write_json(out / "eval.json", {"conversion": report, "intensity_ordering": intensity_ordering(report),
                                    "heldout_l1": heldout_l1(ckpt, test)})
    for name, row in report.items():
        log.info("%-20s detector %.2f intensity %.2f", name, row["detector_accuracy"], row["mean_intensity"])
    return 0


def cmd_gradcheck(args, run):
    from emocat.gradcheck import TOLERANCE, run_suite

    results = run_suite()
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:20s} {err:.3e} {flag}")
        worst = max(worst, err)
    if args.out:
        _write_json(_out_dir(args) / "gradcheck.json", results)
    return 0 if worst <= TOLERANCE else EXIT_INVARIANT


def cmd_ablate(args, run):
    from dataclasses import replace

    from emocat.ablation import run_ablation, write_table

    out = _out_dir(args)
    (out / "config.ini").write_text(run.to_ini())
    inverter = run.transform.kind if run.transform.kind in ("inv-sq", "inv-exp") else "inv-sq"
    rows = run_ablation(replace(run, model=replace(run.model, transform=replace(run.transform, kind=inverter))),
                        _corpus(args, run), out, probe_steps=2000)
    write_table(rows, out)
    print((out / "ablation.md").read_text(), end="")
    return 0


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate the synthetic bilingual corpus"),
    "train": (cmd_train, "run the main training stage"),
    "fine-tune": (cmd_fine_tune, "continue training on the balanced emotional subset"),
    "convert": (cmd_convert, "convert one feature file to a target emotion"),
    "probe": (cmd_probe, "train a leakage probe on frozen bottleneck embeddings"),
    "eval": (cmd_eval, "score conversions of held-out neutral utterances"),
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient oracle suite"),
    "ablate": (cmd_ablate, "train and compare the three ablation systems"),
}


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    d = RunConfig()
    # None means "take it from the config"; the help shows the built-in value
    common.add_argument("--config", metavar="PATH", default=None, help="INI file with run settings")
    common.add_argument("--seed", type=int, default=None,
                        help=f"corpus seed for synth-data [{d.corpus.seed}], training seed otherwise [{d.train.seed}]")
    common.add_argument("--out", metavar="DIR", default=None, help="output directory (file for convert)")
    common.add_argument("--ckpt", metavar="PATH", default=None, help="checkpoint file")
    common.add_argument("--in", dest="inp", metavar="PATH", default=None,
                        help="corpus directory (feature file for convert); generated from [corpus] when absent")
    common.add_argument("--target", metavar="CLASS:INTENSITY", default=None, help="e.g. excited:high")
    common.add_argument("--steps", type=int, default=None,
                        help=f"main steps [{d.train.main_steps}], fine-tune steps [2%% of main] or probe steps [2000]")
    common.add_argument("--transform", choices=["identity", "reversal", "inv-sq", "inv-exp"], default=None,
                        help=f"gradient transform before the adversarial classifier [{d.transform.kind}]")
    common.add_argument("--lambda", dest="lam", type=float, default=None,
                        help=f"transform weight [{d.transform.lam}]")
    common.add_argument("--classifier", choices=["ff", "gru"], default=None,
                        help=f"adversarial classifier [{d.model.classifier_kind}]")
    common.add_argument("--probe", choices=["ff", "gru"], default="gru", help="probe kind (probe only)")
    common.add_argument("--source", choices=["bottleneck", "features"], default="bottleneck",
                        help="what the probe reads (probe only)")
    common.add_argument("--standardize", action="store_true",
                        help="rescale each probe input dimension to unit variance (probe only)")

    parser = argparse.ArgumentParser(prog="emocat", formatter_class=fmt,
                                     description="Emotion conversion with adversarial gradient inversion.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text, formatter_class=fmt)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        run = _run_config(args)
        return COMMANDS[args.command][0](args, run)
    except TrainingDiverged as err:
        print(f"emocat: {err} (last good checkpoint written)", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, ConfigError, FeatureFileError, CheckpointError, ValueError, KeyError,
            OSError) as err:
        print(f"emocat: {err}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
