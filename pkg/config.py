"""
Configuration settings for the few-shot shape recognition toolkit.
"""

import os

from errors import ConfigError


class Config:
    """Application configuration class."""

    def __init__(self):
        # Logging configuration
        self.LOG_LEVEL = os.getenv('FSSD_LOG_LEVEL', 'INFO')
        self.LOG_FILE = os.getenv('FSSD_LOG_FILE', '')
        self.ERROR_LOG_FILE = os.getenv('FSSD_ERROR_LOG_FILE', '')

        # Dataset locations and generation defaults
        self.DATA_ROOT = os.getenv('FSSD_DATA_ROOT', os.path.join('data', 'shapes'))
        self.OUTPUT_DIR = os.getenv('FSSD_OUTPUT_DIR', 'runs')
        self.IMAGE_SIZE = int(os.getenv('FSSD_IMAGE_SIZE', '32'))
        self.PER_CLASS = int(os.getenv('FSSD_PER_CLASS', '400'))

        # Single seed behind all randomness
        self.SEED = int(os.getenv('FSSD_SEED', '0'))

    def validate(self):
        """Validate configuration settings."""
        errors = []

        if self.IMAGE_SIZE < 32:
            errors.append("FSSD_IMAGE_SIZE must be at least 32 pixels")

        if self.PER_CLASS < 1:
            errors.append("FSSD_PER_CLASS must be at least 1")

        if self.SEED < 0:
            errors.append("FSSD_SEED must be non-negative")

        if self.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"FSSD_LOG_LEVEL '{self.LOG_LEVEL}' is not a logging level")

        if errors:
            raise ConfigError("Configuration validation failed:\n" + "\n".join(f"- {error}" for error in errors))

        return True

    def __str__(self):
        """String representation of configuration."""
        config_items = [f"{key}: {value}" for key, value in self.__dict__.items()]
        return "Configuration:\n" + "\n".join(f"  {item}" for item in config_items)
