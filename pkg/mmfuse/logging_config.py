"""
Logging Configuration - stdout logging stamped with the active run id
"""
import logging
import sys

_run_id = "-"


def set_run_id(run_id: str | None) -> None:
    global _run_id
    _run_id = run_id or "-"


class RunContextFilter(logging.Filter):
    """Adds `run_id` to every record so one format string serves all modules"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = _run_id
        return True


def setup_logging(log_level: str = "INFO", run_id: str | None = None) -> None:
    """
    Configure root logging for a CLI invocation.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        run_id: identifier printed in every line (config hash and seed of the run)
    """
    set_run_id(run_id)

    # Remove default handlers
    root_logger = logging.getLogger()
    root_logger.handlers.clear()

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(RunContextFilter())

    root_logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    root_logger.addHandler(console_handler)

    # Suppress noisy logs
    logging.getLogger("opentelemetry").setLevel(logging.WARNING)
