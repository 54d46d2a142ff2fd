"""CoSwin architecture."""
from .config import VARIANTS, ModelConfig, cifar_desk_config, mnist_desk_config
from .coswin import (
    MASK_VALUE,
    CoSwinModel,
    attention_weights,
    build_shift_mask,
    coswin_block,
    coswin_block_pair,
    coswin_msa,
    coswin_shifted_msa,
    drop_path,
    forward,
    grid_to_tokens,
    local_feature_enhance,
    merge_neighbors,
    patch_convert,
    patch_embed,
    patch_merge,
    patchify,
    tokens_to_grid,
    window_attention,
    window_merge,
    window_partition,
)
from .layers import (
    CoSwinBlock,
    LayerNorm,
    Linear,
    LocalFeatureEnhancer,
    Mlp,
    Module,
    PatchEmbed,
    PatchMerge,
    WindowAttention,
    relative_position_index,
)

__all__ = [
    "MASK_VALUE", "VARIANTS", "CoSwinBlock", "CoSwinModel", "LayerNorm", "Linear",
    "LocalFeatureEnhancer", "Mlp", "ModelConfig", "Module", "PatchEmbed", "PatchMerge",
    "WindowAttention", "attention_weights", "build_shift_mask", "cifar_desk_config",
    "coswin_block", "coswin_block_pair", "coswin_msa", "coswin_shifted_msa", "drop_path",
    "forward", "grid_to_tokens", "local_feature_enhance", "merge_neighbors",
    "mnist_desk_config", "patch_convert", "patch_embed", "patch_merge", "patchify",
    "relative_position_index", "tokens_to_grid", "window_attention", "window_merge",
    "window_partition",
]
