"""Cross-modal attention rigid registration for paired 3D volumes."""

from ._core import (
    AttentionBlock,
    CasePair,
    EvalReport,
    FixedInput,
    FormatError,
    Network,
    NonFiniteError,
    RigidTransform,
    Volume,
    cascade_register,
    compose,
    evaluate,
    extract_surface,
    generate_phantom_pair,
    gradcam,
    invert,
    load_model,
    make_dataset,
    paired_t_test,
    read_dataset,
    read_volume,
    register_pair,
    resample_volume,
    run_cli,
    selftest,
    sre,
    train,
    write_dataset,
    write_volume,
)

__all__ = [name for name in dir() if not name.startswith("_")]
