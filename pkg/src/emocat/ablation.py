"""The three-system comparison: reversal with weighted CE, inverter, inverter plus fine-tuning."""
import json
from dataclasses import replace

import numpy as np

from emocat.corpus import EMOTIONS, LEVELS, split_heldout
from emocat.evaluate import eval_conversion, heldout_l1, intensity_ordering, probe_leakage
from emocat.train import fine_tune, train

COLUMNS = ("system", "heldout_l1", "emotional_l1", "probe_accuracy", "probe_majority_rate",
           "detector_medium_high", "intensity_ordered")


def emotional_subset(records, language):
    return [r for r in records if r.language == language and r.emotion != "neutral"]


def summarize(name, ckpt, train_recs, test, spec, language, probe_steps, seed):
    conv = eval_conversion(ckpt, test, spec)
    mh = [conv[f"{e}:{lv}"]["detector_accuracy"] for e in EMOTIONS[1:] for lv in LEVELS[1:]]
    probe = probe_leakage(ckpt, train_recs, "gru", steps=probe_steps, seed=seed)
    return {
        "system": name,
        "heldout_l1": heldout_l1(ckpt, test),
        "emotional_l1": heldout_l1(ckpt, emotional_subset(train_recs, language)),
        "probe_accuracy": probe.accuracy,
        "probe_majority_rate": probe.majority_prediction_rate,
        "probe_baseline": probe.majority_class_baseline,
        "detector_medium_high": float(np.mean(mh)),
        "intensity_ordered": all(intensity_ordering(conv).values()),
        "conversion": conv,
    }


def run_ablation(run, records, out, probe_steps=2000):
    """Train the three systems under ``out`` and return one summary row each.

    ``run.transform`` names the inverter used by systems 2 and 3.
    """
    plan = run.train
    language = plan.target_language
    train_recs, test = split_heldout(records, plan.heldout, language)
    rev_cfg = replace(run.model, transform=replace(run.transform, kind="reversal"))
    systems = [("reversal+wce", rev_cfg, replace(plan, weighted_ce=True)),
               (f"{run.transform.kind}", run.model, replace(plan, weighted_ce=False))]
    rows = []
    inverter_ckpt = None
    for name, cfg, sys_plan in systems:
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        ckpt, _ = train(cfg, sys_plan, train_recs, d / "metrics.csv")
        ckpt.save(d / "checkpoint.bin")
        rows.append(summarize(name, ckpt, train_recs, test, run.corpus, language, probe_steps, plan.seed))
        inverter_ckpt = ckpt
    name = f"{run.transform.kind}+fine-tune"
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    tuned = fine_tune(inverter_ckpt, replace(plan, weighted_ce=False), train_recs, d / "metrics.csv")
    tuned.save(d / "checkpoint.bin")
    rows.append(summarize(name, tuned, train_recs, test, run.corpus, language, probe_steps, plan.seed))
    return rows


def write_table(rows, out):
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for r in rows:
        cells = [r[c] if isinstance(r[c], (str, bool)) else f"{r[c]:.4f}" for c in COLUMNS]
        lines.append("| " + " | ".join(str(c) for c in cells) + " |")
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
