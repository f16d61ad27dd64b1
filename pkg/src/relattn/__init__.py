"""Relevance-attention steering of encoder-decoder summarizers toward
controlling aspects, with online weight selection and few-shot training."""

from .metrics import aspect_relevance, mean_rouge_f1, rouge_all, rouge_lsum, rouge_n, unique_word_ratio, word_overlap
from .model import Checkpoint, ModelConfig, Seq2Seq, generate, load_checkpoint, save_checkpoint
from .relevance import RelAttnControl, RelevanceParams, WrelPredictor, compute_relevance, zero_shot_control
from .selection import default_grid, filter_candidates, select_central, select_oracle, sweep
from .text import ControlledExample, Corpus, Vocabulary, build_vocab, load_jsonl, synth_corpus, tokenize
from .training import TrainConfig, pretrain_backbone, teacher_forced_loss, train_fewshot

__version__ = "0.1.0"
