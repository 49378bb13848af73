"""Active and sequential adaptation of multi-modal volumetric segmentation
models under a labeling budget, benchmarked on synthetic phantoms."""

from .election import ElectionResult, dice, elect_dominant
from .errors import ConfigError, FormatError, ShapeError
from .loop import (
    LoopConfig,
    PoolState,
    RoundRecord,
    RunRecord,
    is_query_step,
    run_active_loop,
    run_lower_bound,
    run_oneoff_loop,
    run_strategy,
    run_upper_bound,
)
from .metrics import EvalResult, aggregate, evaluate, miou
from .model import (
    SegModel,
    TrainConfig,
    extract_features,
    feature_dim,
    load_model,
    poly_lr,
    predict_mask,
    predict_proba,
    save_model,
    train_epochs,
    zero_model,
)
from .phantom import Dataset, DomainSpec, gen_dataset, gen_sample, load_dataset, save_dataset
from .scoring import (
    PairDistanceMatrix,
    PcaBasis,
    UncertaintyMap,
    abundance,
    criterion,
    density,
    entropy_map,
    fit_pca,
    informativeness,
    pair_distance,
    pair_distance_matrix,
    project_sample,
    select_best,
    uncertainty_score,
    wasserstein_1d,
    wasserstein_lp_oracle,
)
from .volume import (
    LabelMask,
    MultiModalSample,
    ProbabilityMap,
    Volume3D,
    read_mask,
    read_probmap,
    read_volume,
    write_mask,
    write_probmap,
    write_volume,
    zscore,
)

__version__ = "0.1.0"
