import sys

from loguru import logger

LOG_FORMAT = "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan> - <level>{message}</level>"


def configure_logging(level="WARNING", json=False):
    """
    Route loguru output to a single stderr sink.

    Args:
        level (str): Minimum level, e.g. ``DEBUG`` or ``WARNING``.
        json (bool): Emit one JSON record per line instead of text.
    """
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT, serialize=json, colorize=False if json else None)
    return logger
