"""oncokit: PET/CT tumour segmentation and survival modelling.

The heavy lifting happens in the compiled ``_oncokit`` extension; this package
re-exports it. Arrays are NumPy float64 (volumes float32); fitted models and
experiment reports are plain dicts that round-trip through JSON.
"""

from ._oncokit import (  # noqa: F401
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    Error,
    EvaluationError,
    FormatError,
    NumericError,
    ParseError,
    ShapeError,
    __version__,
    c_index,
    choose_grid,
    convert_si,
    cox_fit,
    cox_risk,
    cv_split,
    deep_fusion_risk,
    dsc,
    evaluate,
    from_super_image,
    invert_si,
    model_stats,
    mtlr_fit,
    mtlr_risk,
    mtlr_survival,
    precision_recall,
    read_volume,
    run_experiment,
    synthetic_cohort,
    to_super_image,
    write_synthetic_dataset,
    write_volume,
)

__all__ = [name for name in dir() if not name.startswith("_")]
