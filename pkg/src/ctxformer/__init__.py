"""Context-aware self-attention transformer, trainable at desk scale."""

from .attention import (
    AttentionMask,
    HeadConfig,
    make_causal_mask,
    multi_head_attention,
    project_qkv,
    scaled_dot_attention,
)
from .context import (
    ContextConfig,
    ContextParams,
    ContextStrategy,
    LayerTrace,
    assemble_context,
    build_causal_global_context,
    build_deep_context,
    build_deep_global_context,
    build_global_context,
    context_aware_attention,
    contextualize_qk,
    gate_lambda,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, TaskSpec, Vocab, batchify, build_vocab, gen_task
from .errors import (
    CheckpointError,
    ConfigError,
    EmptyInputError,
    NumericError,
    ShapeError,
)
from .estimator import ContextAwareTransformer
from .gradcheck import GradCheckReport, finite_diff_gradcheck
from .model import (
    ModelConfig,
    ModelParams,
    decode_teacher_forced,
    encode,
    forward_loss,
    greedy_decode,
    init_params,
    param_count,
)
from .tensor import Graph, Tensor, backward
from .training import (
    AdamState,
    EvalReport,
    TrainConfig,
    adam_step,
    corpus_bleu,
    evaluate,
    fit,
    lr_at,
    train_loop,
)

__version__ = "0.1.0"
