"""Memory-budgeted int8 BERT-encoder inference engine.

Runs encoder inference under a simulated MCU SRAM limit using tiled
MLP/MHA scheduling, a register-blocked int8 matmul micro-kernel, and a
clustered low-rank embedding runtime, with an exact analytic peak-memory
model and a `.mcub` binary model format.
"""

from .arena import Arena, ArenaStats, OutOfMemory
from .embed_rt import ClusterSpec, ClusteredEmbedding, cluster_of, embed_lookup, embedding_param_count
from .fileformat import load_model, write_model
from .kernels import MicroKernelShape, OpCounts
from .model import BERT_TINY, EncoderConfig, EncoderModel, make_random_model, param_counts
from .qcore import QTensor, QuantParams, dequantize, quantize, requantize
from .sched import (
    InfeasibleBudget,
    SchedulePlan,
    peak_memory_model,
    plan_tile_size,
    run_encoder,
    run_encoder_naive,
)

__all__ = [
    "Arena", "ArenaStats", "OutOfMemory",
    "ClusterSpec", "ClusteredEmbedding", "cluster_of", "embed_lookup",
    "embedding_param_count",
    "load_model", "write_model",
    "MicroKernelShape", "OpCounts",
    "BERT_TINY", "EncoderConfig", "EncoderModel", "make_random_model", "param_counts",
    "QTensor", "QuantParams", "dequantize", "quantize", "requantize",
    "InfeasibleBudget", "SchedulePlan", "peak_memory_model", "plan_tile_size",
    "run_encoder", "run_encoder_naive",
]
