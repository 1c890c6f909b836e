from pfml.network.layers import (
    ENCODER_PRESETS,
    ClassifierHead,
    ConvLayer,
    EncoderConfig,
    FrameEncoder,
    MultiHeadSelfAttention,
    PositionalEncoder,
    ProjectionHead,
    Transformer,
    TransformerBlock,
    TransformerConfig,
    conv_out_len,
)
from pfml.network.model import Backbone, Classifier, PretrainModel, parameter_digest
from pfml.network.optim import (
    AdamHyper,
    Optimizer,
    PlateauSchedule,
    WarmupPlateauSchedule,
    adam_step,
    radam_rectification,
    radam_step,
)
