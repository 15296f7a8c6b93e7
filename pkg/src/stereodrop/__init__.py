"""Stereo waterdrop removal with row-wise dilated attention.

Library modules: ``diffcore`` (operators and gradient checking), ``encoder``,
``rda``, ``disparity``, ``decoder``, ``losses``, ``synthgen``, ``trainer`` and
``metrics``; ``cli`` binds them into the ``stereodrop`` command.
"""
from .model import VARIANTS, StereoDropNet, get_variant
from .synthgen import SceneSpec, StereoSample, generate_sample, read_sample, write_sample
from .trainer import TrainConfig, infer, train

__version__ = "0.1.0"

__all__ = ["VARIANTS", "SceneSpec", "StereoDropNet", "StereoSample", "TrainConfig", "generate_sample",
           "get_variant", "infer", "read_sample", "train", "write_sample"]
