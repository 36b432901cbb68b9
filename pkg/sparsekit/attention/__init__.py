from sparsekit.attention.config import (
    AttnConfig, AttnParams, LinearAttnParams, parse_config, new_attn_params, new_linear_params,
)
from sparsekit.attention.heads import split_heads, project, multi_head, feature_map
from sparsekit.attention.dense import causal_mask, dense_causal_attention, dense_attention
from sparsekit.attention.engine import ChunkLedger, attend_chunk, new_cache, check_linear_mix
from sparsekit.attention.sparse import AttnTape, sparsek_attention, sparsek_attention_backward, linear_mix_attention
