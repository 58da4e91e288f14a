"""Pretrain, fine-tune under two policies, and compare the deviation profiles.

Run: python walkthroughs/03_finetune_profile.py   (about 20 s)
"""

from proxtune.harness import ExperimentConfig, make_splits, run_finetune, run_pretrain
from proxtune.optim import Mode, ProximityPolicy, Schedule

base = ExperimentConfig()
splits = make_splits(base)
pretrained = run_pretrain(base, splits)

policies = {
    "plain Adam": ProximityPolicy(Mode.NONE),
    "MAPS linear 2.0": ProximityPolicy(Mode.MAPS, lambda_max=2.0, schedule=Schedule.LINEAR),
}

finals = {}
for label, policy in policies.items():
    _, records = run_finetune(pretrained.copy(), base.replace(policy=policy), splits)
    finals[label] = records[-1]
    first, last = records[0], records[-1]
    print(f"{label}: train {first.train_loss:.4f} -> {last.train_loss:.4f}, "
          f"retention {first.retention_loss:.4f} -> {last.retention_loss:.4f}, "
          f"projection rate at end {last.projection_rate:.2f}")

print(f"\n{'module':<14}" + "".join(f"{k:>18}" for k in finals))
for m in base.module_names:
    print(f"{m:<14}" + "".join(f"{r.deviations[m]:>18.4f}" for r in finals.values()))
