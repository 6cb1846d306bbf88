"""Walk through the whole pipeline on a small procedural face world.

Runs every stage twice (encoder init and scratch init) in a temporary
directory and prints the per-group delta table. Takes under a minute on CPU.

The budgets here only exercise the plumbing. A GAN trained on a few thousand
samples at 16 px gives the encoder little to learn, so scratch init often
wins at this size. The benefit of pretraining shows up at the desk budgets
used by the slow acceptance tests (32 px, 60k GAN samples, 1% labels).

    python3 tutorials/01_toy_pipeline.py [--keep DIR]
"""
import argparse
import json
import tempfile
from pathlib import Path

import torch

from frboost.runner.compare import compare_runs
from frboost.runner.config import ExperimentConfig
from frboost.runner.stages import Layout, run_pipeline

# Small enough for a laptop: 16x16 faces, a few thousand GAN samples.
SMALL = {
    "gan": {"resolution": 16, "latent_dim": 32, "mapping_layers": 2, "channel_base": 128, "channel_max": 16,
            "total_samples": 4000, "log_every_samples": 1000},
    "encoder": {"trunk_depth": "micro", "input_size": 16, "widths": [8, 16, 16, 32], "total_steps": 2000,
                "log_every_samples": 500},
    "finetune": {"epochs": 6, "freeze_epochs": 2, "margin_s": 32.0},
    "data": {"toy_prior_images": 1000, "toy_people": 200, "toy_images_per_person": 6,
             "toy_test_people": 80, "toy_test_images_per_person": 6},
    "facerec": {"emb_dim": 64},
    "protocol": {"n_pairs": 100, "fpr_targets": [0.01], "fid_samples": 200},
}


def config(root: Path, init: str) -> ExperimentConfig:
    d = json.loads(json.dumps(SMALL))
    d["facerec"]["init"] = init
    d["out_dir"] = str(root / init)
    return ExperimentConfig.from_dict(d, preset="desk")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--keep", help="write experiments here instead of a temp dir")
    args = ap.parse_args()
    torch.set_num_threads(1)

    root = Path(args.keep) if args.keep else Path(tempfile.mkdtemp(prefix="frboost-tour-"))
    reports = {}
    for init in ("scratch", "encoder"):
        print(f"--- {init} init")
        # prep -> (train-gan -> train-encoder) -> train-facerec -> build-pairs -> embed -> evaluate
        reports[init] = run_pipeline(config(root, init))
        rep = reports[init]
        for g in sorted(rep.per_group):
            print(f"  group {g}: accuracy {rep.per_group[g]['accuracy']:.2f}")
        print(f"  avg {rep.avg:.2f}  std {rep.std:.2f}")

    print("\nencoder minus scratch")
    print(compare_runs(reports["scratch"], reports["encoder"]).format())

    # Every stage left a record with the config hash and its artifacts.
    runs = Layout(root / "encoder").runs.read_text().splitlines()
    print(f"\n{len(runs)} run records in {root / 'encoder' / 'runs.jsonl'}")
    for line in runs:
        rec = json.loads(line)
        print(f"  {rec['stage']:14s} {rec['wall_clock_s']:8.1f}s  {rec['config_hash'][:12]}")


if __name__ == "__main__":
    main()
