"""Logging setup for the engine.

Every module logs under the `lqtrack` namespace (`lqtrack.riccati`,
`lqtrack.app`, ...). numpy/scipy warnings are routed into the same handlers.
"""
import logging


LOG_FORMAT = "%(asctime)s [%(levelname)5s] %(name)s: %(message)s"
ROOT_LOGGER = "lqtrack"


def configure_logging(debug: bool = False) -> None:
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT)
    logging.getLogger(ROOT_LOGGER).setLevel(level)
    logging.captureWarnings(True)


def get_logger(area: str) -> logging.Logger:
    return logging.getLogger(f"{ROOT_LOGGER}.{area}")
