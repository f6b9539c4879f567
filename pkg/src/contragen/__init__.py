"""contragen: contrastive sequence-to-sequence training and
similarity-reranked decoding at desk scale.

The package trains small encoder-decoder transformers with a
likelihood warm-up followed by a contrastive stage over self-generated
beam candidates and from-batch targets, and decodes by combining
sequence likelihood with the learned source-target similarity.
"""

from .config import DatasetSpec, ExperimentConfig, load_config
from .contrastive import (
    ContrastivePairs,
    LossConfig,
    OracleConfig,
    batch_oracle_scores,
    build_pairs,
    infonce_loss,
    npairs_loss,
    oracle_score,
    rank_candidates,
)
from .data import (
    ExamplePair,
    PaddedBatch,
    ParallelDataset,
    SyntheticTaskSpec,
    build_vocab_from_jsonl,
    load_jsonl_dataset,
    make_synthetic,
)
from .decoding import (
    BeamConfig,
    Candidate,
    CandidateSet,
    beam_search,
    diverse_beam_search,
    generate,
    rerank_select,
)
from .errors import (
    ConfigError,
    ContractError,
    ContragenError,
    DivergenceError,
    ValidationError,
)
from .evaluation import (
    AblationTable,
    EvalReport,
    ablate_alpha,
    corpus_bleu,
    evaluate_model,
    export_representations,
    selfgen_ratio_sweep,
)
from .model import (
    HiddenStates,
    ModelConfig,
    Representation,
    Seq2SeqTransformer,
    cosine_similarity,
    nll_loss,
    pool_representation,
)
from .training import (
    BaselineMode,
    TrainConfig,
    TrainState,
    adopt_best,
    assemble_candidates,
    build_model,
    dropout_cl_positives,
    init_state,
    train_loop,
    train_step,
    warmup_train,
)
from .vocab import Vocab, build_vocab

__version__ = "0.1.0"
