"""CNN embedding engine."""
from .model import (AdamState, Descriptor, LayerSpec, LossParts, ModelParams, NonFiniteError,
                    adam_step, batch_loss, default_descriptor, forward, forward_reference,
                    gradients, init_params, loss_from_embeddings, reduced_descriptor, relu,
                    softmax, zero_params)
from .train import (Checkpoint, EmbeddingVector, EpochRecord, TrainConfig, TrainingDiverged,
                    embed_dataset, embed_pixels, load_checkpoint, read_embeddings,
                    save_checkpoint, split_rows, train, write_embeddings, write_loss_csv)

__all__ = [
    "AdamState", "Checkpoint", "Descriptor", "EmbeddingVector", "EpochRecord", "LayerSpec",
    "LossParts", "ModelParams", "NonFiniteError", "TrainConfig", "TrainingDiverged",
    "adam_step", "batch_loss", "default_descriptor", "embed_dataset", "embed_pixels",
    "forward", "forward_reference", "gradients", "init_params", "load_checkpoint",
    "loss_from_embeddings", "read_embeddings", "reduced_descriptor", "relu",
    "save_checkpoint", "softmax", "split_rows", "train", "write_embeddings",
    "write_loss_csv", "zero_params",
]
