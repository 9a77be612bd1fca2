"""explicit transformer weights that run several in-context tasks in superposition"""

from .assemble import (
    ConstructedModel, ConstructionPrompt, StreamReading, assemble, execution_weight, execution_weight_limit,
    expected_proportion, make_construction_prompt, verify_superposition,
)
from .layers import (
    build_execution_layers, build_label_flag_layers, build_proportion_attention, build_task_stream,
    build_threshold_mlp,
)
from .layout import ResidualLayout
from .plan import ConstructionSpec, ConstructionTask, copy_task, function_task, parse_tasks, plan_layout
from .relus import SumOfReLUs, fit_sum_of_relus, interpolation_error_bound
