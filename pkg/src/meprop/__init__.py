"""Minimal-effort backpropagation in NumPy.

Three related training techniques built on magnitude top-k selection of
pre-activation gradients:

- sparsified backward passes that touch only the k most significant
  rows of each weight matrix (with exact FLOP accounting and a lazy
  sparse Adam that leaves unselected rows byte-identical);
- counter-based structured pruning that removes rarely selected neurons
  and cascades the removal into the following layer, with cycled
  training;
- per-example activation masking that freezes rarely useful neurons at
  their recorded values and trains only the rest.
"""

from .activate import (
    ActMask,
    PerExampleRecord,
    build_masks,
    load_masks,
    masked_train,
    pretrain_and_record,
    save_masks,
    update_magnitude_probe,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    BatchIterator,
    Dataset,
    load_mnist,
    read_idx,
    sequence_rule_tags,
    split_dev,
    synth_linear_timing,
    synth_sequence_task,
    write_idx,
)
from .errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    DataFormatError,
    DimensionMismatch,
    TruncatedFileError,
)
from .harness import (
    ExperimentConfig,
    MetricsRow,
    bench_backprop,
    report,
    run,
    sweep,
)
from .layers import (
    MLP,
    ForwardCache,
    LayerGradients,
    LinearLayer,
    activation_backward,
    activation_forward,
    dropout_backward,
    dropout_forward,
    linear_backward_full,
    linear_backward_meprop,
    linear_forward,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
    unified_topk_select,
)
from .numerics import (
    FlopCounter,
    IndexSet,
    SparseRowGradient,
    densify,
    masked_transpose_matvec,
    matvec,
    outer,
    sparse_outer,
    top_k_indices,
    top_k_mask,
    transpose_matvec,
)
from .optim import AdamState
from .recurrent import (
    GATES,
    BiLstmTagger,
    LstmCell,
    lstm_step_backward_full,
    lstm_step_backward_meprop,
    lstm_step_forward,
)
from .simplify import (
    PruneConfig,
    PruneReport,
    UpdateCounter,
    cycled_train,
    prune_layer,
    prune_lstm_joint,
    select_survivors,
)
from .training import (
    evaluate_mlp,
    evaluate_tagger,
    mlp_backward_batch,
    mlp_forward_batch,
    train_mlp_epoch,
    train_tagger_epoch,
)

__version__ = "0.1.0"
