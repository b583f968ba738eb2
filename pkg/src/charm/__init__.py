"""charm: budget-constrained multi-scale image tokenization for ViT pipelines."""

from .cost import BACKBONE_PRESETS, CostBreakdown, cost_report, suggest_len, vit_macs
from .embeddings import (
    EmbeddingTable,
    PosGrid,
    init_embedding_table,
    interpolate_grid,
    position_for_tokens,
    scale_embed,
    synthetic_pos_grid,
)
from .evaluation import (
    ScoreDistribution,
    ScoreTable,
    acc,
    emd_loss,
    l1_loss,
    mean_score,
    metric_report,
    plcc,
    read_scores_csv,
    srcc,
)
from .imaging import (
    AugmentConfig,
    GridSpec,
    Image,
    augment,
    crop_to_grid,
    load_image,
    max_edge_downscale,
    prepare,
    resize_bilinear,
    seq_len,
    to_grayscale,
)
from .importance import (
    ImportanceMap,
    SelectionConfig,
    entropy_score,
    frequency_score,
    gradient_score,
    load_saliency_map,
    score_cells,
    select_cells,
)
from .tokenizer import (
    PAD_SCALE_ID,
    PackFormatError,
    SelectionPlan,
    TokenPack,
    TokenizerConfig,
    plan_budget,
    read_pack,
    tokenize,
    tokenize_single_scale,
    tokenize_three_scale,
    tokenize_two_scale,
    write_pack,
)
from .vit_core import (
    ViTConfig,
    Weights,
    WeightsFormatError,
    assemble_input,
    encoder_forward,
    forward_pack,
    head,
    init_weights,
    load_weights,
    patch_encode,
    save_weights,
)

__version__ = "0.1.0"
