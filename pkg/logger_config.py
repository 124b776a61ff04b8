"""
Logging configuration for the few-shot shape recognition toolkit.
"""

import logging
import logging.handlers
import os
import sys
from datetime import datetime
from typing import Dict, Optional

from config import Config


def setup_logger(name: str, config: Config = None) -> logging.Logger:
    """Set up and configure logger for the application."""

    if config is None:
        config = Config()

    logger = logging.getLogger(f'fssd.{name}')

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    log_level = getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    logger.setLevel(log_level)
    logger.propagate = False

    detailed_formatter = logging.Formatter(
        fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    simple_formatter = logging.Formatter(
        fmt='%(levelname)s: %(message)s'
    )

    # Console handler (stderr keeps stdout free for reports)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)

    if config.LOG_FILE:
        try:
            file_handler = logging.handlers.RotatingFileHandler(
                config.LOG_FILE,
                maxBytes=10 * 1024 * 1024,  # 10MB
                backupCount=5
            )
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(detailed_formatter)
            logger.addHandler(file_handler)
        except OSError as e:
            logger.warning(f"Could not create file handler for {config.LOG_FILE}: {e}")

    if config.ERROR_LOG_FILE:
        try:
            error_handler = logging.handlers.RotatingFileHandler(
                config.ERROR_LOG_FILE,
                maxBytes=10 * 1024 * 1024,  # 10MB
                backupCount=5
            )
            error_handler.setLevel(logging.ERROR)
            error_handler.setFormatter(detailed_formatter)
            logger.addHandler(error_handler)
        except OSError as e:
            logger.warning(f"Could not create error handler for {config.ERROR_LOG_FILE}: {e}")

    return logger


class TrainingLogger:
    """Specialized logger for episodic training runs."""

    def __init__(self, config: Config = None, log_every: int = 50):
        self.config = config or Config()
        self.logger = setup_logger('training', self.config)
        self.log_every = max(1, log_every)
        self.start_time = None
        self.episode_count = 0
        self.checkpoint_count = 0
        self.nonfinite_count = 0

    def start_run(self, run_name: str, settings: Dict):
        """Log the start of a run with its settings."""
        self.start_time = datetime.now()
        self.episode_count = 0
        self.checkpoint_count = 0
        self.nonfinite_count = 0
        self.logger.info(f"Starting {run_name}")
        self.logger.info("-" * 50)
        for key in sorted(settings):
            self.logger.info(f"  {key}: {settings[key]}")

    def log_episode(self, episode: int, terms: Dict[str, float], lr: float):
        """Log one episode's loss terms at the configured cadence."""
        self.episode_count += 1
        if episode % self.log_every != 0:
            return
        parts = ", ".join(f"{name}={value:.4f}" for name, value in terms.items())
        self.logger.info(f"Episode {episode}: {parts}, lr={lr:.2e}")

    def log_checkpoint(self, episode: int, path: str):
        """Log a checkpoint write."""
        self.checkpoint_count += 1
        self.logger.info(f"Episode {episode}: checkpoint written to {path}")

    def log_nonfinite(self, episode: int, terms: Dict[str, float]):
        """Log a diverged episode."""
        self.nonfinite_count += 1
        self.logger.error(f"Episode {episode}: non-finite loss - {terms}")

    def end_run(self, run_name: str, summary: Optional[Dict[str, float]] = None):
        """Log the end of a run with summary."""
        if self.start_time:
            duration = datetime.now() - self.start_time
            self.logger.info("-" * 50)
            self.logger.info(f"Completed {run_name}")
            self.logger.info(f"Duration: {duration}")
            self.logger.info(f"Episodes run: {self.episode_count}")
            self.logger.info(f"Checkpoints written: {self.checkpoint_count}")
            for key, value in (summary or {}).items():
                self.logger.info(f"{key}: {value}")


def log_environment_info():
    """Log information about the environment."""
    import numpy as np

    logger = setup_logger('environment')

    logger.info("Environment Information:")
    logger.info(f"  Python version: {sys.version.split()[0]}")
    logger.info(f"  NumPy version: {np.__version__}")
    logger.info(f"  Working directory: {os.getcwd()}")
    logger.info("  Environment variables:")

    env_vars = [
        'FSSD_LOG_LEVEL',
        'FSSD_LOG_FILE',
        'FSSD_DATA_ROOT',
        'FSSD_OUTPUT_DIR',
        'FSSD_IMAGE_SIZE',
        'FSSD_PER_CLASS',
        'FSSD_SEED'
    ]

    for var in env_vars:
        value = os.getenv(var)
        if value:
            logger.info(f"    {var}: {value}")
        else:
            logger.info(f"    {var}: [NOT SET]")
