"""Losses, optimizer schedule and the toy training loop."""
from calico.training.losses import LossWeights, combined_loss, dice_loss, focal_loss, text_loss
from calico.training.optim import OptimizerState, optimizer_step

__all__ = ["LossWeights", "OptimizerState", "combined_loss", "dice_loss", "focal_loss", "optimizer_step",
           "text_loss"]
