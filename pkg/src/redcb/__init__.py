"""redcb: probe visual tokens for redundancy, distill prototypes, prune.

The package is organized bottom-up: `numerics` and `clustering` hold the
math, `oracle` answers model queries (closed-form, toy transformer, or
replayed from disk), `corpus` generates labeled synthetic grids,
`analysis` runs the per-token probing experiments, `codebook` turns
records into a prototype codebook and prunes with it, and `baselines`
compares pruning strategies. The `redcb` console script fronts it all.
"""
from .analysis import (
    AnalysisConfig,
    AnalysisRecord,
    analyze_corpus,
    analyze_image,
    cascaded_jsd,
    global_leave_one_out,
    neighborhood_of,
    read_records,
    region_leave_one_out,
    single_token_probe,
    write_records,
)
from .baselines import (
    StrategyReport,
    attention_scores,
    clssim_scores,
    compare_strategies,
    random_prune,
)
from .clustering import ClusterResult, dpc_cluster, dpc_delta, dpc_local_density
from .codebook import (
    PROFILES,
    RedundancyCodebook,
    Thresholds,
    build_codebook,
    build_codebook_from_records,
    calibrate_threshold,
    context_independent_filter,
    load_codebook,
    probing_flops,
    prune_budget,
    prune_threshold,
    redundancy_scores,
    save_codebook,
    select_candidates,
)
from .corpus import generate_corpus, load_corpus, planted_majority_class, save_corpus
from .numerics import (
    ProbDist,
    SparseLogits,
    cosine_similarity_matrix,
    head_vocab_distributions,
    jsd,
    kl_divergence,
    l2_normalize_rows,
    softmax,
    top1_probability,
)
from .oracle import (
    AnalyticOracle,
    AttentionRecord,
    Oracle,
    OracleCapabilities,
    OracleResponse,
    PromptKind,
    RecordingOracle,
    ReplayOracle,
    RequestKey,
    ToyTransformerOracle,
    VisualInput,
    build_single_token_input,
    grid_visual_input,
    replay_lookup,
    write_replay_store,
)
from .wire import CorpusImage

__version__ = "0.1.0"
