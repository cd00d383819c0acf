"""Cancelable fingerprint templates from kernel-PCA features and keyed shift-order hashing.

Typical flow::

    bank = extract_features(dataset)            # descriptor -> KPCA features
    code = enroll(feature, key)                 # protected HashCode
    similarity(reference, code).score           # fraction of agreeing positions
"""

from .config import Config, load_config
from .dataset import Dataset, NoiseSpec, User, fvc_protocol_pairs, synth_dataset
from .descriptor import (
    DescriptorParams,
    DescriptorSet,
    Minutia,
    MinutiaeSet,
    SimilarityMatrix,
    build_descriptor,
    load_similarity_matrix,
    pairwise_similarity,
    parse_minutiae,
)
from .errors import (
    CancelHashError,
    ConflictError,
    DimensionError,
    DomainError,
    EmptyInputError,
    IncompatibleTemplateError,
    InsufficientDataError,
    IntegrityError,
    NotFoundError,
    NumericError,
    ParseError,
    StorageError,
    ValidationError,
)
from .evaluation import (
    EvalReport,
    PipelineConfig,
    ScoreSet,
    compute_eer,
    extract_features,
    revocability_analysis,
    run_pipeline,
    sweep,
    unlinkability_analysis,
)
from .hashing import (
    HashCode,
    HashComponent,
    PermutationSet,
    UserKey,
    derive_permutation_set,
    enroll,
    inject_security_param,
    permute_and_sample,
    shift_order,
)
from .kpca import FeatureVector, KernelParams, TrainedProjection, build_kernel_matrix, fit, kernel_value, project_query
from .matching import MatchScore, decide, similarity
from .store import TemplateRecord, TemplateStore, load_template, revoke, save_template

__version__ = "0.1.0"
