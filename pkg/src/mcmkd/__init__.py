"""Masked context modelling with knowledge distillation for MIL feature extractors, at desk scale.

Everything runs on numpy float64 with a small reverse-mode autodiff core
(:mod:`mcmkd.tensor`). The main entry points:

- :mod:`mcmkd.data` synthetic slides, context windows, archives
- :mod:`mcmkd.encoders` student/teacher patch encoders
- :mod:`mcmkd.mcm` masking, losses, fine-tuning variants
- :mod:`mcmkd.mil` gated-attention MIL and AUROC
- :mod:`mcmkd.pipeline` end-to-end runs; :mod:`mcmkd.cli` the command line
"""

from .data import SlideConfig, generate_slide
from .encoders import PatchEncoder, init_student, pretrain_teacher
from .mcm import FinetuneConfig, Variant, build_model, finetune_epoch, masked_l1_loss, sample_mask
from .mil import AttentionMIL, auroc, train_mil
from .tensor import Tensor, grad_check

__version__ = "0.1.0"
