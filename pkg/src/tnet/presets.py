"""Named model + traversal configurations."""

from __future__ import annotations

from .network import ModelConfig
from .traversal import TraversalConfig

# ImageNet-scale model: 2 levels, 5x5 grid of 77 px cells on a 224 px image, 3 locations.
IMAGENET_PRESET = (
    ModelConfig(
        backbone="paper-imagenet",
        num_classes=1000,
        location_variant="concat",
        location_hidden=512,
        encoding_mode="concat_linear",
        encoding_dim=512,
    ),
    TraversalConfig(levels=2, base_resolution=77, grid_n=5, cell_fraction=0.34375, locations_per_level=(3,)),
)

# fMoW-scale model: 3 levels, 3x3 grid with 50% overlap, 2 locations then 1 per location.
FMOW_LITE_PRESET = (
    ModelConfig(
        backbone="paper-fmow-lite",
        num_classes=62,
        location_variant="se",
        location_hidden=80,
        encoding_mode="project_add",
        encoding_dim=320,
        feature_weighting=True,
    ),
    TraversalConfig(levels=3, base_resolution=224, grid_n=3, cell_fraction=None, overlap_fraction=0.5, locations_per_level=(2, 1)),
)

# Desk-scale glyph task: 2 levels, 4x4 grid of 16 px cells on a 64 px image, 1 location.
TINY = (
    ModelConfig(backbone="tiny", num_classes=4, location_variant="concat", location_hidden=32, encoding_dim=32),
    TraversalConfig(levels=2, base_resolution=16, grid_n=4, cell_fraction=0.25, locations_per_level=(1,)),
)

PRESETS = {"paper-imagenet": IMAGENET_PRESET, "paper-fmow-lite": FMOW_LITE_PRESET, "tiny": TINY}
