"""Proximity-constrained fine-tuning: Adam with L2-SP, TPGM, SPD and module-scheduled projection."""

from .harness import (
    ExperimentConfig,
    MetricsRecord,
    emit_metrics,
    read_metrics,
    run_finetune,
    run_freeze_ablation,
    run_pretrain,
    run_scheduler_sweep,
)
from .models import ModelSpec, ModuleLayout, backward, build_model, default_model_spec, forward, loss_mse
from .optim import (
    AdamState,
    Mode,
    ProximityPolicy,
    Schedule,
    StepReport,
    adam_propose,
    assign_lambda,
    deviation_ratio,
    l2sp_gradient,
    optimizer_step,
    project_l2_ball,
    proximal_step,
    spd_condition,
)
from .param_store import (
    FreezeMask,
    ModelParameters,
    ParameterGroup,
    apply_freeze_mask,
    l2_deviation,
    load_archive,
    module_deviations,
    save_archive,
    snapshot_pretrained,
)
from .tasks import TaskSpec, generate, make_task_triple

__version__ = "0.1.0"
