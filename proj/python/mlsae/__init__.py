"""Multi-layer sparse autoencoder toolkit (Python bindings)."""

from ._core import (
    DimensionError,
    MlsaeError,
    Sae,
    TunedLens,
    fvu,
    generate_corpus,
    geometric_median,
    load_snapshot,
    mmcs,
    parse_train_config,
    read_stream,
    read_stream_header,
    run_cli,
    validate_stream,
    write_lens,
    write_stream,
)

__all__ = [
    "DimensionError",
    "MlsaeError",
    "Sae",
    "TunedLens",
    "fvu",
    "generate_corpus",
    "geometric_median",
    "load_snapshot",
    "mmcs",
    "parse_train_config",
    "read_stream",
    "read_stream_header",
    "run_cli",
    "validate_stream",
    "write_lens",
    "write_stream",
]
