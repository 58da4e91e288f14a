"""The 3x3 schedule by strength sweep, written to CSV.

Run: python walkthroughs/05_scheduler_sweep.py [out.csv]   (about 40 s)
"""

import sys

from proxtune.harness import ExperimentConfig, run_pretrain, run_scheduler_sweep

base = ExperimentConfig()
table = run_scheduler_sweep(base, pretrained=run_pretrain(base))

for row in sorted(table.rows, key=lambda r: r["total_deviation"]):
    print(f"{row['schedule']:<14} total_dev {row['total_deviation']:.4f}  "
          f"train {row['train_loss']:.4f}  retention {row['retention_loss']:.4f}")

if len(sys.argv) > 1:
    with open(sys.argv[1], "w") as fh:
        fh.write(table.to_csv())
    print("wrote", sys.argv[1])
