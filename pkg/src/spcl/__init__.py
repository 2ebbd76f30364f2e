"""Example-influence engine and benchmark harness for rehearsal-based
continual learning."""

from .autodiff import ParamVector, Tensor, backward, leaf, no_grad
from .data import (
    Batch,
    TaskDataset,
    TaskStream,
    make_batch,
    make_split_digits,
    make_split_gaussians,
    masked_logits,
)
from .errors import ConfigError, NumericError, OracleError, SpclError
from .gradients import forward, grad, hessian, per_example_grads
from .influence import (
    InfluenceRecord,
    ValidationBatches,
    compute_influence,
    fuse,
    influence_vectors,
    pareto_gamma,
    pseudo_update,
    sample_validation,
)
from .kmeans import kmeans
from .memory import (
    MemoryBuffer,
    MemoryEntry,
    select_rehearsal,
    select_rehearsal_random,
    update_influence_stat,
)
from .models import MLPClassifier, ModelSpec
from .oracle import exact_influence, loo_influence, sign_agreement, sp_quantities
from .trainer import (
    AccuracyMatrix,
    MetricsReport,
    TrainConfig,
    compute_metrics,
    influence_weighted_step,
    run_stream,
)

__version__ = "0.1.0"
