"""Physics-informed GP prediction and control of Hammerstein-Wiener systems."""

__version__ = "0.1.0"

from .linsys import (  # noqa: F401
    HWSystem,
    LinearStateSpace,
    Trajectory,
    h2_norm,
    make_hw_system,
    random_stable_system,
    simulate_hw,
)
from .hankel import DataEmbedding, build_embedding, build_hankel, split_past_future  # noqa: F401
from .linpred import ARXParams, fit_subspace, pe_order, subspace_predict  # noqa: F401
from .gpcore import (  # noqa: F401
    GaussianPosterior,
    KernelSpec,
    fit_narx_gp,
    gp_posterior,
    kernel_block,
    kernel_eval,
    narx_predict,
    se_kernel,
    tc_kernel,
    zero_kernel,
)
from .implicitgp import HyperParams, ImplicitGPModel, posterior_f, posterior_f_batch  # noqa: F401
from .hyperopt import (  # noqa: F401
    FitOptions,
    HyperPrior,
    PackedGamma,
    build_S_gamma,
    cross_validate_zeta,
    fit_jmapml,
    jmapml_objective,
    pack,
    unpack,
)
from .predict import (  # noqa: F401
    PredictionQuery,
    PredictOptions,
    predict,
    predict_hammerstein,
    recover_nonlinearities,
)
from .control import (  # noqa: F401
    ClosedLoopLog,
    ControllerConfig,
    chi2_quantile,
    closed_loop,
    expected_cost,
    solve_rhc,
    solve_rhc_blackbox,
    solve_rhc_spc,
    tighten,
)
from .solvers import OptimProblem, local_minimize, particle_swarm  # noqa: F401
