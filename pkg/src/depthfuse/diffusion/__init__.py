from .models import (
    AnalyticScore,
    ConditionChannel,
    LinearDecoder,
    MLPDenoiser,
    check_embedding,
    mlp_backward,
    predict_noise,
)
from .schedule import NoiseSchedule, add_noise, build_schedule
from .training import (
    SemanticCode,
    denoising_loss,
    optimize_embedding,
    pretrain_base,
    train_injector,
    tune_adapters,
)
from .world import WorldConfig, WorldModel, prompt_embedding

__all__ = [
    "AnalyticScore",
    "ConditionChannel",
    "LinearDecoder",
    "MLPDenoiser",
    "NoiseSchedule",
    "SemanticCode",
    "WorldConfig",
    "WorldModel",
    "add_noise",
    "build_schedule",
    "check_embedding",
    "denoising_loss",
    "mlp_backward",
    "optimize_embedding",
    "predict_noise",
    "pretrain_base",
    "prompt_embedding",
    "train_injector",
    "tune_adapters",
]
