from .gaussian_chain import (
    GaussianChainSpec,
    default_gaussian_chain,
    gaussian_chain_build,
    gaussian_chain_exact_posterior,
    gaussian_chain_exact_subposterior,
)
from .owl import (
    OwlData,
    OwlTruth,
    load_owl_data,
    owl_build,
    owl_capture_loglik,
    owl_count_loglik,
    owl_fecundity_loglik,
    owl_link,
    owl_Q,
    simulate_owl_data,
    write_owl_data,
)
