"""Matrix-vector lowering of CNN/ViT building blocks, canonical-form
expansion, and brute-force verification."""

from .errors import (
    CapacityError,
    ParseError,
    RangeError,
    RankError,
    ShapeError,
    SpecError,
    UatcvError,
    ValidationError,
    VerificationError,
)
from .tensor import (
    AXIS_NAMES,
    DEFAULT_ELEMENT_CAP,
    SplitMix64,
    Tensor,
    TensorShape,
    element_cap,
    flatten,
    matmul,
    matvec,
    random_uniform,
    set_element_cap,
    unflatten,
    zeros,
)
from .reference import (
    ACTIVATIONS,
    AttnParams,
    ConvParams,
    PoolParams,
    conv2d_direct,
    conv3d_direct,
    ffn_direct,
    mean_pool_direct,
    mha_direct,
    patchify,
    transformer_block_direct,
    unpatchify,
)
from .lowering import (
    LoweredForm,
    diamond,
    extract_mha_effective_matrix,
    lower_conv2d_1_O,
    lower_conv2d_I_O,
    lower_conv3d,
    lower_ffn,
    lower_mean_pool,
)
from .symbolic import (
    CanonicalUAT,
    Dependence,
    ParamAtom,
    build_residual_block,
    build_residual_chain,
    build_transformer_chain,
    build_vgg_chain,
    classify_params,
    emit,
    eval_canonical,
    eval_vector,
)

__version__ = "0.1.0"
