"""Per-module strength schedules over a module stack.

Run: python walkthroughs/02_module_schedules.py
"""

from proxtune.models import build_model, default_model_spec
from proxtune.optim import Mode, ProximityPolicy, Schedule, assign_lambda

spec = default_model_spec()
model = build_model(spec)
names = model.module_names
K = len(names)

print(f"{'module':<14}" + "".join(f"{s.value:>10}" for s in Schedule))
for k, name in enumerate(names, start=1):
    head = model.module_groups(k)[0]
    row = [assign_lambda(k, K, ProximityPolicy(Mode.MAPS, lambda_max=2.0, schedule=s), head) for s in Schedule]
    print(f"{name:<14}" + "".join(f"{v:>10.3f}" for v in row))

# The ramp spans every module including the head, and the head is built
# from scratch so it is exempt whatever the schedule.
print("\nscratch modules:", [m.name for m in spec.module_layout if m.from_scratch])
