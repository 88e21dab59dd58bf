"""TextMage: a from-scratch Bangla image-captioning pipeline.

CNN encoder + LSTM decoder trained with cross-entropy on a handwritten
float64 autodiff core, plus BLEU/METEOR evaluation and a deterministic
three-stage training protocol.
"""

from .curves import CurvePoint, export_curves
from .data import (DatasetManifest, Sample, Vocabulary, build_vocabulary,
                   encode_caption, generate_synthetic_dataset, load_image,
                   load_manifest, make_batches, split_dataset, tokenize)
from .decoder import (DecoderConfig, DecoderModel, beam_decode, build_decoder,
                      decode_train, greedy_decode, lstm_step, train_decoder)
from .encoder import (EncoderConfig, EncoderModel, build_encoder, classify,
                      encode, train_encoder)
from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     ShapeError, TextMageError)
from .metrics import BleuReport, MeteorReport, bleu, meteor, token_accuracy
from .optim import (AdamConfig, AdamState, SGDConfig, SgdState, adam_step,
                    init_adam_state, init_sgd_state, sgd_step)
from .pipeline import (Checkpoint, RunConfig, caption_image, evaluate_checkpoint,
                       load_checkpoint, load_run_config, run_hidden_sweep,
                       save_checkpoint, train_all, train_joint, train_stage1,
                       train_stage2)
from .tensor import (GradTape, Tensor, activation, backward, conv2d,
                     cross_entropy, dropout, embedding_lookup, flatten,
                     matmul, maxpool2d, relu, sigmoid, softmax, tanh)

__version__ = "0.1.0"
