"""Few-shot cross-domain code search over a small bi-modal transformer."""

from .corpus import (
    CorpusSplit,
    MetaTask,
    PairExample,
    RawPair,
    SyntheticSpec,
    Vocabulary,
    build_batch_pool,
    build_vocab,
    deduplicate,
    encode_pairs,
    generate_negatives,
    generate_synthetic_corpus,
    load_pairs,
    split_task,
)
from .finetune import FinetuneConfig, MatchFinetuner, matching_loss, triplet_loss
from .meta import MetaConfig, MetaLearner, inner_update, outer_gradient
from .model import (
    Checkpoint,
    EncoderConfig,
    ParameterSet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pretrain import MlmPretrainer, PretrainConfig, lr_at, mask_sequence, mlm_loss
from .search import (
    CodeSearcher,
    EvalReport,
    SearchResult,
    data_size_sweep,
    evaluate,
    evaluate_checkpoint,
    mrr,
    rank_candidates,
    topk_accuracy,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CodeSearcher", "CorpusSplit", "EncoderConfig", "EvalReport",
    "FinetuneConfig", "MatchFinetuner", "MetaConfig", "MetaLearner", "MetaTask",
    "MlmPretrainer", "PairExample", "ParameterSet", "PretrainConfig", "RawPair",
    "SearchResult", "SyntheticSpec", "Vocabulary", "build_batch_pool", "build_vocab",
    "data_size_sweep", "deduplicate", "encode_pairs", "evaluate", "evaluate_checkpoint",
    "generate_negatives", "generate_synthetic_corpus", "init_params", "inner_update",
    "load_checkpoint", "load_pairs", "lr_at", "mask_sequence", "matching_loss",
    "mlm_loss", "mrr", "outer_gradient", "rank_candidates", "save_checkpoint",
    "split_task", "topk_accuracy", "triplet_loss",
]
