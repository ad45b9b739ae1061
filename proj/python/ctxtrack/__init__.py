"""Context-aware instance association on synthetic twin videos."""

from ._ctxtrack import (
    ConfigError,
    ContractViolation,
    align_context,
    boundary_band,
    canonical_config,
    config_hash,
    context_cross_attention,
    contrastive_loss,
    evaluate,
    fuse_context,
    hungarian,
    init_context_head,
    load_scenario,
    save_twin_scenario,
    surrounding_embedding,
    train,
    twin_scenario,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "align_context",
    "boundary_band",
    "canonical_config",
    "config_hash",
    "context_cross_attention",
    "contrastive_loss",
    "evaluate",
    "fuse_context",
    "hungarian",
    "init_context_head",
    "load_scenario",
    "save_twin_scenario",
    "surrounding_embedding",
    "train",
    "twin_scenario",
]
