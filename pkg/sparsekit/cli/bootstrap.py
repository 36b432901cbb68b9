"""
命令行启动时依次执行的 bootstrapper, 以及容器里的公共 provider.
"""
from __future__ import annotations

import logging
import os
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from logging.config import dictConfig
from pathlib import Path
from typing import Dict, List, Type

import torch
import yaml
from rich.console import Console

from sparsekit.cli.config import RunConfig, load_run_config
from sparsekit.container import Container, Provider
from sparsekit.exceptions import ArgumentException, ConfigException
from sparsekit.numerics import Precision, seed_everything, set_precision

THREADS_ENV = "SPARSEK_THREADS"

DEFAULT_LOGGING: Dict = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {"format": "%(asctime)s - %(name)s - %(levelname)s: %(message)s"},
        "run_formatter": {"format": "%(asctime)s - %(name)s - %(levelname)s: %(message)s - %(run)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "level": "INFO", "formatter": "default",
                    "stream": "ext://sys.stderr"},
        "run_console": {"class": "logging.StreamHandler", "level": "INFO", "formatter": "run_formatter",
                        "stream": "ext://sys.stderr"},
    },
    "loggers": {
        "sparsekit": {"handlers": ["console"], "level": "WARNING", "propagate": False},
        "sparsekit_train": {"handlers": ["run_console"], "level": "INFO", "propagate": False},
    },
}


@dataclass
class RunOptions:
    """
    global options every sub-command shares.
    """
    seed: int = 0
    threads: int = 1
    precision: Precision = "float64"


class Bootstrapper(metaclass=ABCMeta):

    @abstractmethod
    def bootstrap(self, container: Container) -> None:
        pass


class LoggingBootstrapper(Bootstrapper):
    """
    loads a YAML dictConfig when the file exists, the built-in one otherwise.
    """

    def __init__(self, config_path: str | Path | None = None, logger_name: str = "sparsekit"):
        self.config_path = Path(config_path) if config_path else None
        self.logger_name = logger_name

    def bootstrap(self, container: Container) -> None:
        config = DEFAULT_LOGGING
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigException(f"logging config {self.config_path} not found", at=str(self.config_path))
            with self.config_path.open("r", encoding="utf-8") as f:
                config = yaml.safe_load(f)
            for handler in config.get("handlers", {}).values():
                if "filename" in handler:
                    Path(handler["filename"]).parent.mkdir(parents=True, exist_ok=True)
        dictConfig(config)
        container.set(logging.Logger, logging.getLogger(self.logger_name))


class PrecisionBootstrapper(Bootstrapper):

    def __init__(self, precision: Precision = "float64"):
        self.precision = precision

    def bootstrap(self, container: Container) -> None:
        set_precision(self.precision)
        container.force_fetch(RunOptions).precision = self.precision


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            threads = int(raw)
        except ValueError:
            raise ArgumentException(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 1:
        raise ArgumentException(f"threads must be >= 1, got {threads}")
    return threads


class ThreadsBootstrapper(Bootstrapper):
    """
    --threads, then SPARSEK_THREADS, then 1.
    """

    def __init__(self, threads: int | None = None):
        self.threads = threads

    def bootstrap(self, container: Container) -> None:
        n = resolve_threads(self.threads)
        torch.set_num_threads(n)
        container.force_fetch(RunOptions).threads = n


class SeedBootstrapper(Bootstrapper):

    def __init__(self, seed: int = 0):
        self.seed = seed

    def bootstrap(self, container: Container) -> None:
        seed_everything(self.seed)
        container.force_fetch(RunOptions).seed = self.seed


class ConsoleProvider(Provider[Console]):
    """
    rich console on stderr; stdout stays machine-readable.
    """

    def contract(self) -> Type[Console]:
        return Console

    def factory(self, con: Container) -> Console:
        return Console(stderr=True)


class RunConfigProvider(Provider[RunConfig]):

    def __init__(self, path: str | Path | None = None):
        self.path = path

    def contract(self) -> Type[RunConfig]:
        return RunConfig

    def factory(self, con: Container) -> RunConfig:
        return load_run_config(self.path)


def boot(container: Container, bootstrappers: List[Bootstrapper], providers: List[Provider]) -> Container:
    # options are per run, never shared with a parent container
    container.set(RunOptions, RunOptions())
    container.register(*providers)
    for bootstrapper in bootstrappers:
        bootstrapper.bootstrap(container)
    return container
