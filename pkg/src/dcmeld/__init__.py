"""Divide-and-conquer Markov melding for chain-structured Bayesian models."""

from .dc import (
    MergeConfig,
    MeldingRunResult,
    RunLedger,
    StagePlan,
    dc_melding_3,
    dc_melding_multi,
    extended_merge,
    extended_merge_weights,
    extract_joint_samples,
    naive_merge,
    plan_stages,
)
from .melding import (
    ChainMeldedModel,
    PooledPriorSpec,
    PsiProposal,
    Submodel,
    decompose_pooled_prior,
    log_melded_joint,
    log_melded_subset,
    log_pooled_prior,
)
from .particles import (
    IndexMultiset,
    ResampleScheme,
    WeightedParticleSystem,
    back_left_update,
    back_right_update,
    ess,
    forward_update,
    resample,
)
from .smc import (
    MoveKernelConfig,
    TemperingSchedule,
    TemperingTarget,
    next_temperature,
    rwm_move,
    smc_sampler,
    tempered_log_density,
    weight_increment,
)

__version__ = "0.1.0"
