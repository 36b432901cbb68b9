#!/usr/bin/env python
"""
walk through sparsekit with the local files in ./demo:
train a toy decoder on the repeating corpus, generate from it, score passkeys.
"""
import os.path

from rich.prompt import Prompt

from sparsekit.cli.commands import main
from sparsekit.container import Container

pwd = os.getcwd()
root_path = pwd + "/demo"
config_path = "/".join([root_path, "configs"])
runtime_path = "/".join([root_path, "runtime"])

logging_config = config_path + "/logging.yaml"
root_container = Container()


def _run(*argv: str) -> int:
    return main(["--log-config", logging_config, *argv], container=Container(root_container))


def run_eval() -> int:
    return _run("eval", "--scores", "[0.9, 0.5, 0.1]", "--k", "2")


def run_train() -> int:
    return _run("train", "--config", config_path + "/run.json", "--out", runtime_path + "/train")


def run_generate() -> int:
    """
    the first run starts from a prompt, later runs continue the saved caches.
    """
    out = runtime_path + "/generate"
    argv = ["generate", "--checkpoint", runtime_path + "/train/checkpoint.spkt", "--tokens", "50", "--out", out]
    if os.path.exists(out + "/generation.json"):
        argv += ["--resume", out]
    else:
        argv += ["--prompt-tokens", "[0, 1, 2, 3]"]
    return _run(*argv)


def run_gradcheck() -> int:
    return _run("gradcheck", "--size-preset", "op")


demos = {
    "eval": run_eval,
    "train": run_train,
    "generate": run_generate,
    "gradcheck": run_gradcheck,
}

default_demo = "eval"


def main_demo() -> None:
    chosen = Prompt.ask("choose demo", choices=[key for key in demos.keys()], default=default_demo)
    runner = demos[chosen]
    exit(runner())


if __name__ == "__main__":
    main_demo()
