"""Label-free adaptation of malware classifiers under concept drift.

The pipeline has three steps: adversarially disentangle domain-invariant
features and pseudo-label the drifted target (Step I), keep only confident,
inlier pseudo-labels (Step II), and retrain a deployable classifier from
them (Step III, with adversarial, warm-start, and alignment strategies plus
reference bounds).  Rolling-update and leave-one-cluster-out protocols wrap
the pipeline for longitudinal and family-novelty evaluation.
"""

from .adaptation import (
    AdaptationConfig,
    AdvdaClassifier,
    DanClassifier,
    SupervisedClassifier,
    map_pseudo_labels_to_graphs,
    mmd_loss,
    run_strategy,
    train_advda,
    train_bounds,
    train_dan,
    train_warm_start,
)
from .config import RunConfig, load_run_config
from .datasets import (
    AdaptationTask,
    BenchmarkSpec,
    DomainDataset,
    GraphSample,
    ImageSample,
    LabelAudit,
    build_cluster_task,
    build_rolling_tasks,
    bytes_to_image,
    hide_labels,
    load_dataset,
    load_task,
    make_benchmark_task,
    make_cluster_datasets,
    make_drift_benchmark,
    make_monthly_datasets,
    save_dataset,
    save_task,
    split_ratio_preserving,
)
from .evaluation import (
    Metrics,
    compute_metrics,
    evaluate,
    export_embeddings,
    run_leave_one_cluster_out,
    run_pipeline,
    run_rolling,
)
from .maxdirep import (
    MaxDirepClassifier,
    StepOneOutputs,
    classification_loss,
    discriminator_loss,
    generator_adversarial_loss,
    infer_target,
    kl_loss,
    reconstruction_loss,
    train_step_one,
)
from .modelio import load_model, save_model
from .outliers import OutlierConfig, OutlierVerdicts, PcaReducer, detect_outliers, pca_reduce
from .selection import (
    SelectionResult,
    acs,
    pseudo_label_accuracy,
    pseudo_labeled_subset,
    select_pseudo_labels,
)

__version__ = "0.1.0"
