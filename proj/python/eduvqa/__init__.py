"""EduVQA: structured mixture-of-experts quality prediction for generated educational videos."""

from ._eduvqa import (
    BadMagicError,
    ConfigError,
    DegenerateInputError,
    Error,
    FormatError,
    Model,
    NumericalError,
    ShapeError,
    TruncationError,
    UnsupportedVersionError,
    UsageError,
    ablation_config,
    compute_metrics,
    consolidate,
    consolidate_csv,
    default_config,
    default_schedule,
    generate_synthetic,
    gmad_pairs,
    gradient_check,
    krcc,
    load_checkpoint,
    make_splits,
    plcc,
    read_manifest,
    read_tensor,
    rmse,
    srcc,
    train,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
