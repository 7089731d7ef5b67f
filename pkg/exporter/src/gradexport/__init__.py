"""gradexport: per-filter gradient-saliency profiles from real vision models,
written in the filterpot profile manifest format."""

__version__ = "0.1.0"

from .export import (
    ExportError,
    ExportSpec,
    FilterRecord,
    conv_filter_inventory,
    export_profiles,
    group_filter_counts,
    resnet_group_rule,
    toplevel_group_rule,
)

__all__ = [
    "ExportError",
    "ExportSpec",
    "FilterRecord",
    "conv_filter_inventory",
    "export_profiles",
    "group_filter_counts",
    "resnet_group_rule",
    "toplevel_group_rule",
]
