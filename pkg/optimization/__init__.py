from .adamw import AdamW, AdamWParameters, adamw_step
from .schedule import LearningRateSchedule, ScheduleParameters, cosine_lr, clip_grad_norm
from .evaluation import EvalResult, evaluate_params
from .trainer import RunConfig, Trainer, train, evaluate
