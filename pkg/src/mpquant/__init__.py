"""mpquant: post-training mixed-precision quantization at desk scale.

Measures per-layer sensitivity of a small trainable transformer by three
independent methods, allocates 16/8/4-bit precision per layer, quantizes
weights per output channel, and reports compression against accuracy or
perplexity cost.
"""

__version__ = "0.1.0"

from .allocate import (  # noqa: F401
    InfeasibleBudgetError,
    ObjectiveConfig,
    PrecisionPlan,
    budgeted_plan,
    kmeans_plan,
    objective,
    uniform_plan,
)
from .model import (  # noqa: F401
    Batch,
    Dataset,
    ModelConfig,
    TrainingError,
    TransformerModel,
    backward,
    evaluate,
    forward,
    gen_classification,
    gen_lm,
    loss,
    train,
)
from .model_io import (  # noqa: F401
    MemoryReport,
    WeightContainer,
    container_from_model,
    load,
    memory_report,
    model_from_container,
    save,
)
from .quant import (  # noqa: F401
    QuantizedTensor,
    QuantParams,
    apply_plan,
    dequantize,
    quant_error,
    quantize,
)
from .rng import Rng  # noqa: F401
from .sensitivity import (  # noqa: F401
    CCAResult,
    PerturbationSpec,
    PruneMask,
    SensitivityProfile,
    cca_rho1,
    correlation_sensitivity,
    perturbation_sensitivity,
    prune_mask,
    pruning_sensitivity,
    segment_stats,
)
from .tensor import kmeans, matmul, quantile, stats, svd_top  # noqa: F401
