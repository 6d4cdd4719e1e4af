"""Class-incremental learning with adaptively integrated distillation, uncertainty-regularized
training and Remix-thresholded CutMix replay."""

__version__ = "0.1.0"
