from sparsekit.selection.mask import SelectionMask, SelectionMode, SELECTION_MODES, build_mask, IrreversibleTopK
from sparsekit.selection.scoring import (
    ScoringConfig, ScoringParams, TimestepNormState,
    new_scoring_params, score_tokens, timestep_normalize, init_mimic_attention,
)
