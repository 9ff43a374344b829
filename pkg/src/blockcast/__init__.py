"""Block-pipelined model multicast planning and replica-scaling simulation."""

from .errors import (CapacityError, IncompleteLogError, InvalidArgumentError,
                     ScheduleInvalidError, UnsatisfiableScalingError,
                     UnsupportedConfigurationError)
from .multicast import (Block, BlockPlan, ModelSpec, MulticastSchedule, SubGroup,
                        Transfer, Violation, attach_orders,
                        build_binomial_schedule, compose_schedule, k_way_orders,
                        partition_blocks, partition_subgroups,
                        predicted_transfer_s, select_block_count,
                        validate_schedule)
from .pipeline import (ExecutionPipeline, Stage, assign_blocks_to_stages,
                       completion_ordered_groups, generate_pipelines,
                       plan_2d_schedule, plan_mode_switch,
                       select_multi_gpu_strategy)
from .simengine import (AutoscalePolicy, ClusterSpec, ScaleDecision, SimResult,
                        autoscale, baseline_schedule, run, transfer_step_time)
from .workload import (MetricsReport, SimEvent, TraceRecord, aggregate,
                       load_trace, synth_burst, write_trace)

__version__ = "0.1.0"

__all__ = [
    "Block", "BlockPlan", "ModelSpec", "MulticastSchedule", "SubGroup",
    "Transfer", "Violation", "attach_orders", "build_binomial_schedule",
    "compose_schedule", "k_way_orders", "partition_blocks",
    "partition_subgroups", "predicted_transfer_s", "select_block_count",
    "validate_schedule",
    "ExecutionPipeline", "Stage", "assign_blocks_to_stages",
    "completion_ordered_groups", "generate_pipelines", "plan_2d_schedule",
    "plan_mode_switch", "select_multi_gpu_strategy",
    "AutoscalePolicy", "ClusterSpec", "ScaleDecision", "SimResult",
    "autoscale", "baseline_schedule", "run", "transfer_step_time",
    "MetricsReport", "SimEvent", "TraceRecord", "aggregate", "load_trace",
    "synth_burst", "write_trace",
    "CapacityError", "IncompleteLogError", "InvalidArgumentError",
    "ScheduleInvalidError", "UnsatisfiableScalingError",
    "UnsupportedConfigurationError",
]
