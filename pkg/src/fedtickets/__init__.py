"""Deterministic federated-learning simulator with lottery-ticket pruning,
backdoor poisoning, and a mask-structure defense."""

from .data import (
    ImageDataset,
    PoisonSpec,
    TriggerPattern,
    apply_trigger,
    generate_dataset,
    load_dataset,
    make_asr_testset,
    make_trigger,
    poison_count,
    poison_dataset,
    save_dataset,
)
from .errors import (
    ArchitectureError,
    ClientRoundError,
    ConfigError,
    EmptyAsrSetError,
    EmptyDatasetError,
    FedTicketsError,
    InsufficientClientsError,
    LayerCollapseError,
    OutputLockedError,
    ShapeMismatchError,
    TrainingDivergedError,
    UndefinedOverlapError,
)
from .federation import (
    ClientState,
    DetectionFlags,
    FederationConfig,
    RoundRecord,
    ServerState,
    aggregate_ltns,
    client_update,
    detect,
    fine_tune,
    run_rounds,
    similarity_matrix,
)
from .metrics import (
    EvalReport,
    SimilarityEntry,
    asr,
    cda,
    evaluate,
    overlap_curve,
    per_class_accuracy,
    similarity_table,
    spearman_trend,
)
from .nn import (
    Gradients,
    LayerSpec,
    ModelParams,
    TrainConfig,
    backward,
    ce_loss,
    forward,
    init_params,
    load_model,
    predict,
    save_model,
    sgd_step,
    train,
    validate_arch,
)
from .provenance import (
    OutputLock,
    canonical_json,
    config_hash,
    derive_seed,
    read_csv,
    write_csv,
    write_json,
    write_jsonl,
)
from .scenario import (
    DatasetSpec,
    EBSpec,
    FederationSpec,
    ModelSpec,
    PoisonCfg,
    ScenarioConfig,
    TrainSpec,
    TriggerSpec,
    load_scenario,
    save_scenario,
    split_dataset,
)
from .tickets import (
    MaskWindow,
    PruneMask,
    TicketDraw,
    apply_mask,
    draw_ticket,
    draw_tickets,
    eb_step,
    extract_mask,
    load_mask,
    mask_distance,
    mask_similarity,
    neuron_overlap,
    overlap_categories,
    save_mask,
)

__all__ = [name for name in dir() if not name.startswith("_")]
