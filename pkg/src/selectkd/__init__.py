"""Selective token-weighted knowledge distillation on tabular n-gram models."""

from ._kernels import BACKEND
from .analysis import (fixed_point_study, grad_check, landscape_probe, noisy_setup, spec_decode_sim,
                       tar_study, tar_verdict)
from .divergence import (FKL, RKL, SKL, SRKL, DivergenceKind, Kind, divergence, distillm2_loss, fkl,
                         grad_logits, rkl, selectkd_loss, skl, srkl)
from .errors import NumericError, ParameterError
from .models import (Adam, GenMode, NGramModel, Origin, SGD, Sequence, apply_grad, corpus_teacher, generate,
                     generate_batch, load_model, random_teacher, save_model)
from .prob_core import hellinger, log_softmax, sample, softmax, top_k_set, total_variation
from .trainer import Schedule, TrainingConfig, TrainingTrace, run_training, train_step
from .verifier import Mode, VerificationOutcome, VerifierConfig, tar, verify, verify_batch

__version__ = "0.1.0"
