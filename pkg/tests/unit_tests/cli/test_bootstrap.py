import logging

import pytest
import torch
import yaml
from rich.console import Console

from sparsekit.cli.bootstrap import (
    THREADS_ENV, ConsoleProvider, LoggingBootstrapper, RunConfigProvider, RunOptions, SeedBootstrapper,
    ThreadsBootstrapper, boot, resolve_threads,
)
from sparsekit.cli.config import RunConfig
from sparsekit.container import Container
from sparsekit.exceptions import ArgumentException, ConfigException


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    assert resolve_threads(3) == 3
    monkeypatch.setenv(THREADS_ENV, " 2 ")
    assert resolve_threads(None) == 2
    # the flag wins over the environment
    assert resolve_threads(4) == 4
    monkeypatch.setenv(THREADS_ENV, "two")
    with pytest.raises(ArgumentException):
        resolve_threads(None)
    with pytest.raises(ArgumentException):
        resolve_threads(0)


def test_boot_fills_run_options():
    threads = torch.get_num_threads()
    try:
        container = boot(
            Container(),
            bootstrappers=[ThreadsBootstrapper(1), SeedBootstrapper(7)],
            providers=[ConsoleProvider(), RunConfigProvider(None)],
        )
    finally:
        torch.set_num_threads(threads)
    options = container.force_fetch(RunOptions)
    assert (options.seed, options.threads, options.precision) == (7, 1, "float64")
    console = container.force_fetch(Console)
    assert console is container.force_fetch(Console)
    assert container.force_fetch(RunConfig) == RunConfig()


def test_logging_from_yaml(tmp_path):
    log_file = tmp_path / "logs" / "sparsekit.log"
    config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"plain": {"format": "%(name)s %(levelname)s %(message)s"}},
        "handlers": {"file": {"class": "logging.FileHandler", "formatter": "plain", "filename": str(log_file)}},
        "loggers": {"sparsekit": {"handlers": ["file"], "level": "DEBUG", "propagate": False}},
    }
    path = tmp_path / "logging.yaml"
    path.write_text(yaml.safe_dump(config))

    container = boot(Container(), bootstrappers=[LoggingBootstrapper(path)], providers=[])
    logger = container.force_fetch(logging.Logger)
    assert logger.name == "sparsekit"
    logger.info("hello from the run")
    for handler in logger.handlers:
        handler.flush()
    assert "sparsekit INFO hello from the run" in log_file.read_text()

    handlers = list(logger.handlers)
    LoggingBootstrapper().bootstrap(Container())
    for handler in handlers:
        handler.close()


def test_missing_logging_config(tmp_path):
    with pytest.raises(ConfigException):
        LoggingBootstrapper(tmp_path / "nope.yaml").bootstrap(Container())
