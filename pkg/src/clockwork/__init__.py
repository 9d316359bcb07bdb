"""Clockwork diffusion at desk scale: a split UNet whose low-resolution core is
periodically replaced by a lightweight adaptor during sampling."""

from .adaptor import Adaptor, AdaptorSpec, build_adaptor
from .clockwork import ClockSchedule, clockwork_predict_noise, generate, make_clock
from .errors import (ArchiveError, ClockworkError, ConfigurationError, InvalidCheckError, NumericError,
                     OrderingError, ProtocolError, StatisticalValidityError)
from .sampler import make_grid, make_schedule, sample_loop
from .unet import SplitUNet, UNetConfig, build_unet

__version__ = "0.1.0"
