"""Rule extraction from sparse CNN filters: train, binarize, learn, explain."""

from .backbone import Backbone, BackboneConfig, load_checkpoint, run_model, save_checkpoint
from .binarization import BinarizationTable, binarize_dataset, read_table, write_table
from .dataset import DatasetSplit, LabeledImage, generate_synthetic, load_image_folder
from .evaluation import (
    AggregateReport,
    RunResult,
    accuracy,
    check_paper_claims,
    fidelity,
    run_experiment,
)
from .inference import FactSet, Justification, classify, classify_table, justify
from .labelling import FilterLabel, apply_labels, label_filters, top_activations
from .rules import (
    Literal,
    Rule,
    RuleSet,
    fold_sem,
    parse_rules,
    ruleset_size,
    validate_stratification,
)
from .sparsity import (
    FilterProbabilityMatrix,
    SparsityConfig,
    ThresholdTensor,
    compute_P_method1,
    compute_P_method2,
    compute_thresholds,
    sigmoid_activations,
    sparsity_loss,
    total_loss,
)
from .training import (
    STRATEGIES,
    StrategySchedule,
    TrainConfig,
    TrainLog,
    TrainingDiverged,
    build_schedule,
    run_strategy,
)

__version__ = "0.1.0"
