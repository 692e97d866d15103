"""Config-driven experiment runner and the ``ucplab`` command line."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import ResultRecord, RunError, load_record, run

__all__ = ["ConfigError", "ExperimentConfig", "ResultRecord", "RunError", "load_config", "load_record",
           "parse_config", "run"]
