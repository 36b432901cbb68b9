from sparsekit.cli.config import RunConfig, parse_run_config, load_run_config, dump_run_config
from sparsekit.cli.commands import main, build_parser
