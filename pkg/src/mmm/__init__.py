"""Multi-layer, multi-residual, multi-stream discrete units from SSL features."""

__version__ = "0.1.0"

from .errors import (
    ArgumentError,
    ConfigError,
    CRCError,
    DataError,
    DivergenceError,
    FormatError,
    MMMError,
    RepairError,
    ValidationError,
    VersionError,
)
from .kmeans import Codebook, TrainConfig, assign, assign_batch, kmeans_train, repair_empty_clusters
from .metrics import EvalReport, StreamRateSpec, bitrate, distortion, evaluate, usage_stats
from .multilayer import (
    LayerWeights,
    MultiLayerCodec,
    TokenGrid,
    fuse_embeddings,
    learn_layer_weights,
    mmm_encode,
    mmm_train,
    select_top_layers,
)
from .rvq import ResidualStack, StreamTokens, residual_energy_profile, rvq_decode, rvq_encode, rvq_train
from .store import load_codec, load_tokens, save_codec, save_tokens
from .tensor_io import (
    Dataset,
    FeatureSequence,
    LayeredFeatures,
    SyntheticSpec,
    generate_synthetic,
    read_feature_file,
    read_manifest,
    subsample_utterances,
    write_feature_file,
)
