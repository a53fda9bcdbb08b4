"""Minimal CNN engine: layers, network container, Adam and training."""
from .layers import (BlockSpec, Conv2D, Dense, Flatten, FusedMBConv, MaxPool2D, MBConv, NNError, ReLU,
                     Sequential, ShapeMismatch, Sigmoid, SqueezeExcite, build_block, conv2d_forward,
                     conv_output_dim, fused_mbconv_forward, maxpool_forward, mbconv_forward, pool_output_dim,
                     relu, se_block, sigmoid)
from .network import (ActivationTape, Gradients, LayerStack, ScalingConfig, StaleTape, backward, backward_from,
                      build_network, compound_scale, evaluate_loss, forward, predict_logits, predict_proba,
                      softmax, softmax_cross_entropy)
from .optim import Adam
from .train import (EmptySplit, ImageSet, TrainingData, TrainingLog, TrainState, adam_step, load_checkpoint,
                    save_checkpoint, to_tensor, train)
