from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .model import (
    CompiledFlow,
    FlowConfig,
    FlowNumericError,
    FlowParams,
    FlowTrace,
    InvalidParameterError,
    actnorm_forward,
    actnorm_init,
    coupling_forward,
    flow_inverse,
    flow_logprob,
    forward_graph,
    from_columns,
    init_params,
    invconv_forward,
    latent_logprob,
    log_likelihood,
    nll_loss,
    param_names,
    squeeze,
    to_columns,
    unsqueeze,
)
from .train import EpochRecord, TrainingDivergedError, TrainOptions, TrainResult, train
