"""Super weight and super activation tooling for small decoder LMs on CPU."""

from .checkpoint import CheckpointError, load_checkpoint, load_safetensors, load_token_corpus, read_report, write_report
from .detect import (
    DetectionConfig,
    SuperActivationRecord,
    SuperWeightRecord,
    detect_super_weights,
    prune_topk_other,
    sensitivity_sweep,
    stopword_shift,
    trace_super_activation,
)
from .evaluate import blocksize_sweep, perplexity, simulate_w8a8
from .model import Intervention, ModelSpec, WeightStore, forward, make_toy_model, next_token_distribution
from .quant import QuantScheme, dequantize, quantize, quantize_activation_restore, quantize_weight_clip_restore

__version__ = "0.1.0"
