"""
Weakly supervised nodule segmentation from four-point annotations.
"""

__version__ = "0.3.0"

from .config import RunConfig
from .driver import evaluate, train
from .cli import main

__all__ = ['RunConfig', 'train', 'evaluate', 'main']
