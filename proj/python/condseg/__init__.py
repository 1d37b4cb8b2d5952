from ._condseg import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    ModalityError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
    dice,
    evaluate,
    gen_dataset,
    generate_phantom,
    gradcheck,
    infer,
    normalize_intensity,
    read_volume,
    train,
    write_volume,
)

__all__ = [
    "BadMagicError",
    "BadVersionError",
    "ConfigError",
    "ModalityError",
    "NonFiniteError",
    "ShapeError",
    "TruncatedError",
    "dice",
    "evaluate",
    "gen_dataset",
    "generate_phantom",
    "gradcheck",
    "infer",
    "normalize_intensity",
    "read_volume",
    "train",
    "write_volume",
]
