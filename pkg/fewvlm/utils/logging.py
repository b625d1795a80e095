import logging
from copy import deepcopy
from pathlib import Path

import yaml
from dareplane_utils.logging.logger import get_logger

logger = get_logger("fewvlm", add_console_handler=True)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def add_file_handler(file_path: Path = Path("fewvlm.log")):
    # add a local file handler
    fh = logging.FileHandler(file_path)
    formatter = deepcopy(logger.handlers[0].formatter)
    formatter.no_color = True  # type: ignore

    fh.formatter = formatter

    logger.addHandler(fh)


def configure_logging(level: str | None = None, log_file: str | None = None):
    """Apply configs/logging.yaml to the package logger

    Parameters
    ----------
    level : str | None
        Overwrites the level from `configs/logging.yaml` if given.
        Common python logging names are accepted: DEBUG, INFO, WARNING, ERROR
    log_file : str | None
        Overwrites the log file from `configs/logging.yaml` if given.
    """
    log_cfg = yaml.safe_load(open(CONFIG_DIR / "logging.yaml"))
    log_path = Path(log_file or log_cfg["log_file"])
    log_path.parent.mkdir(exist_ok=True, parents=True)

    # only one file handler per process, commands may be chained in tests
    if not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
        add_file_handler(log_path)

    logger.setLevel(level or log_cfg["level"])
