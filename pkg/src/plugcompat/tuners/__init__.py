from plugcompat.tuners.core import (
    METHODS,
    Context,
    TunerHyper,
    TunerModule,
    default_hyper,
    get_method,
    kd_loss,
    make_context,
    module_logits,
    module_loss,
    module_probabilities,
    total_loss,
    train_tuner,
)
from plugcompat.tuners import heads as _heads  # noqa: F401  (registers methods)
from plugcompat.tuners.prompts import (
    AttnFuser,
    attn_fuse,
    build_contcoop_classifier,
    class_conditioned_prompts,
    fuse,
    prompt_classifier,
)

__all__ = [
    "METHODS",
    "AttnFuser",
    "Context",
    "TunerHyper",
    "TunerModule",
    "attn_fuse",
    "build_contcoop_classifier",
    "class_conditioned_prompts",
    "default_hyper",
    "fuse",
    "get_method",
    "kd_loss",
    "make_context",
    "module_logits",
    "module_loss",
    "module_probabilities",
    "prompt_classifier",
    "total_loss",
    "train_tuner",
]
