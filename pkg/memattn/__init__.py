# flake8: noqa: F401, F403
from .attention import (
    AttentionParams,
    BlockActivations,
    BlockParams,
    FfnParams,
    NormParams,
    count_params,
    dense_attention,
    multi_head_attention,
    project_qkv,
    transformer_block,
)
from .bank import (
    BankHandle,
    BankHeader,
    BankSet,
    MemoryEntry,
    fetch_payload,
    knn_search,
    merge_banks,
    open_bank,
    open_banks,
    write_bank,
)
from .bench import (
    AblationRow,
    BenchMode,
    EfficiencyReport,
    count_flops,
    run_ablation,
    run_efficiency,
    time_inference,
)
from .builder import BuildReport, ClassDatasetManifest, build_all, build_bank, load_manifest
from .cache import LRUCache
from .config import RunConfig, resolve_config
from .console import enable_logging
from .constants import *
from .encoder import (
    EncodeResult,
    EncoderConfig,
    EncoderWeights,
    Fingerprint,
    encode,
    fingerprint,
    init_encoder_weights,
    load_encoder_weights,
    load_features,
    patch_embed,
    save_encoder_weights,
    save_features,
)
from .exceptions import *
from .memory import (
    BlockConfig,
    FusionMode,
    FusionWeights,
    MemorizingBlock,
    RetrievedMemory,
    compute_fusion_weights,
    fuse_attention,
    memorizing_block_forward,
    memory_attention_single,
)
from .numerics import (
    Prng,
    init_gaussian,
    l2_distance,
    l2_distances,
    l2_normalize,
    matmul,
    softmax_rows,
)
from .volume import Volume, read_volume, synthetic_volume, write_volume
