from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal

from pydantic.v1 import BaseModel, Extra, Field

from sparsekit.attention.config import parse_config
from sparsekit.exceptions import ConfigException, StorageException
from sparsekit.trainer.config import ToyModelConfig, TrainHyperParams

TaskName = Literal["text", "repeat", "recall", "passkey", "uniform"]


class RunConfig(BaseModel):
    """
    命令行 train / generate / passkey 共用的运行配置.
    所有字段都可省略, 未知字段直接报错, 避免 k / w 预算被静默配错.
    """

    model: ToyModelConfig = Field(default_factory=ToyModelConfig)
    hyper: TrainHyperParams = Field(default_factory=TrainHyperParams)
    task: TaskName = Field(default="text", description="batch source used by train")
    corpus: List[str] = Field(default_factory=list, description="text files or directories for task=text")
    eval_corpus: List[str] = Field(default_factory=list, description="held-out text for eval_ppl")

    class Config:
        extra = Extra.forbid


def parse_run_config(data: dict | None) -> RunConfig:
    return parse_config(RunConfig, data)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageException(f"cannot read run config {path}", at=str(path), e=e)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigException(f"run config {path} is not valid JSON: {e}", at=str(path), e=e)
    if not isinstance(data, dict):
        raise ConfigException(f"run config {path} must be a JSON object", at=str(path))
    return parse_run_config(data)


def dump_run_config(cfg: RunConfig) -> str:
    return cfg.json(indent=2)
