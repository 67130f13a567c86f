"""BatchNorm canonization and LRP attribution for small CNN graphs."""

from ._canonxai import (
    Error,
    Model,
    Report,
    attribute,
    composite_names,
    count_configurations,
    evaluate,
    fixture,
    fixture_names,
    gini,
    grid_search,
    load_dataset,
    metric_names,
    normalize,
    pool,
    rma,
    rra,
    saliency,
    ssim,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
