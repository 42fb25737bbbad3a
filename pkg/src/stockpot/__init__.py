"""stockpot: checkpoint geometry and anchored weight merging."""

__version__ = "0.1.0"

from stockpot.tensor_store import (  # noqa: E402
    Checkpoint,
    FormatError,
    SchemaError,
    SchemaReport,
    TensorRecord,
    load_checkpoint,
    save_checkpoint,
    validate_schema,
)
from stockpot.geometry import (  # noqa: E402
    DeltaCheckpoint,
    Granularity,
    delta,
    distance_to,
    geometry_report,
    pairwise_angle,
    perturb_from_center,
    pseudo_center,
    verify_shell_properties,
)
from stockpot.plane import plane_grid  # noqa: E402
from stockpot.merge import (  # noqa: E402
    interpolate_pair,
    interpolation_ratio,
    greedy_soup,
    periodic_merge_replay,
    stock_merge,
    uniform_soup,
    variance_optimal_ratio,
    wise_ft,
)
