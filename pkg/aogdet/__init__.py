# aogdet/__init__.py
"""
Reconfigurable And-Or graph for multiclass object detection: HOG feature
pyramids, shared part classifiers, greedy multiclass inference and the
dynamical structural optimization trainer.
"""

import logging

__version__ = '1.0.0'

_LOG_FORMAT = '[%(asctime)s] %(levelname)s: %(message)s'


def configure_logging(level='INFO'):
    """
    Attaches a single stream handler to the package logger.

    Safe to call repeatedly: the handler is installed once and only the level
    is updated on later calls.
    """
    logger = logging.getLogger('aogdet')
    logger.setLevel(level)
    if not any(getattr(h, '_aogdet_handler', False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._aogdet_handler = True
        logger.addHandler(handler)
    for handler in logger.handlers:
        handler.setLevel(level)
    return logger
