"""DeFormer at desk scale: a transformer QA encoder whose lower layers run
question and passage separately, so passage states can be cached offline."""
from .decomposed import DeformerModel, deformer_forward, transfer_weights
from .encoder import EncoderWeights, ModelConfig, encode_full, forward, pack_pair
from .losses import LossWeights

__all__ = ["DeformerModel", "EncoderWeights", "LossWeights", "ModelConfig", "deformer_forward",
           "encode_full", "forward", "pack_pair", "transfer_weights"]
__version__ = "0.1.0"
