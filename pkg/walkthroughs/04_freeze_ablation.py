"""Freeze ablation: which blocks need to move for the new task?

Run: python walkthroughs/04_freeze_ablation.py   (about 45 s)
"""

from proxtune.harness import ExperimentConfig, standard_freeze_masks, run_freeze_ablation, run_pretrain

base = ExperimentConfig()
pretrained = run_pretrain(base)
table = run_freeze_ablation(base, standard_freeze_masks(base), pretrained)

cols = ["train_loss", "retention_loss", "shift_loss", "total_deviation"]
print(f"{'mask':<22}" + "".join(f"{c:>16}" for c in cols))
for row in table.rows:
    print(f"{row['mask']:<22}" + "".join(f"{row[c]:>16.4f}" for c in cols))

# Frozen modules keep exactly zero deviation; the rest of the stack absorbs
# the shift. Freezing everything but the head fits the new task worst.
