"""Desk-scale lottery-ticket analysis for a small NMT transformer.

Library layout:
  autodiff    float64 tensors with reverse-mode differentiation
  model       encoder-decoder transformer with addressable parameters
  corpus      synthetic annotated translation language + BLEU
  training    Adam, rewindable LR schedule, masked training
  checkpoint  binary checkpoint files
  pruning     global magnitude/random pruning and the IMP loop
  dumps       persisted activation/attention captures
  probing     linear & MLP probes, z-scores, trend classification
  similarity  NeuronSim, linear CKA, AttentionSim, SVD, concentration
  pipeline    config-driven stage runner with a resumable manifest
  cli         `prunelens` command
"""

from .corpus import SyntheticGrammar, corpus_bleu, generate_corpus
from .model import ModelConfig, ParameterRegistry, count_params, forward, greedy_decode
from .pruning import LthFamily, imp_run, magnitude_prune, random_prune, sparsity_report
from .similarity import (attention_concentration, attention_sim, linear_cka,
                         neuron_corr, neuron_sim, svd_variance)
from .training import (LRSchedule, TrainRecipe, evaluate_bleu, rewind_lr,
                       rewind_weights, train)

__version__ = "0.1.0"
