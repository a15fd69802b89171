"""Online low-rank maintenance of exponential-average K-factors and their
regularized inverses, with dense oracles for the accompanying error theory."""

from .brand import GeneralLowRank, brand_update, symmetric_brand
from .errors import (
    ConfigError,
    DimensionMismatch,
    IndefiniteInput,
    InvalidCorrectionSize,
    KFOError,
    MalformedFile,
    NotSymmetric,
    RankBudgetExceeded,
    RankTooLarge,
    ZeroReference,
    ZeroSpectrum,
)
from .linalg import LowRankSPSD, rsvd_spsd, symmetric_evd, thin_qr, truncate
from .maintainers import (
    BKFAC,
    BKFACC,
    BRKFAC,
    ExactKFAC,
    MaintainerState,
    RKFAC,
    RegularizedInverse,
    apply_inverse,
    apply_inverse_linear,
    light_correction,
    maintainer_step,
    make_reg_inverse,
)
from .stream import ExactFactorState, StreamConfig, ea_step, gen_update, load_stream, write_stream

__version__ = "0.1.0"
