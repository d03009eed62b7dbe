"""shapelab: a desk-scale vision-language training laboratory.

A numpy implementation of a prefix-LM multimodal transformer with
structured-output token codecs (location/segmentation tokens, VQ-VAE mask
tokenizer), staged pretraining with an rsqrt schedule, KV-cache decoding,
and ablation/variance/limited-data harnesses, all exercised on a
procedurally generated shape-world corpus.
"""

from .vocab import VocabSpec, encode_text, decode_text
from .layout import MaskMode, LossMode, SequenceLayout, assemble, \
    attention_mask, loss_weights
from .vit import EncoderConfig, VitEncoder, patchify, unpatchify
from .connector import ConnectorConfig, Connector
from .lm import LMConfig, DecoderLM, InitStrategy
from .model import ModelConfig, MultimodalModel, prepare_batch, batch_loss
from .codec import Box, box_encode, box_decode, VqConfig, VqvaeModel, \
    mask_encode, mask_decode, format_detection, parse_detection, \
    format_segmentation, parse_segmentation
from .shapeworld import Difficulty, ShapeWorldScene, generate_scene, \
    TaskExample, build_task, MixtureSpec, SeedStream, sample_batch, \
    split_seeds, dedup_audit, build_transfer_set
from .train import SchedulePlan, FreezePlan, TrainPlan, TransferHParams, \
    lr_at, run_stage, run_transfer, run_stage0, train_vqvae
from .infer import KvCache, DecodeConfig, prefill, extend, decode, \
    decode_text_output, bench
from .metrics import MetricResult, exact_match, miou, box_iou, \
    relative_regret
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .harness import AblationGrid, run_ablation, run_variance, run_lowdata
from .evaluate import evaluate_examples, make_eval_fn

__version__ = "0.1.0"
