import json
import logging
import logging.handlers
import os
import sys
import traceback
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from utils.exceptions import PlacementError

EXTRA_FIELDS = (
    "operation", "processing_time", "algorithm", "snapshots",
    "seed", "n_records", "error_code",
)


class ColoredFormatter(logging.Formatter):
    """Colored formatter for console output."""

    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
        'RESET': '\033[0m'
    }

    def format(self, record):
        # Work on a copy so file handlers keep the plain level name
        record = logging.makeLogRecord(record.__dict__)
        log_color = self.COLORS.get(record.levelname, self.COLORS['RESET'])
        record.levelname = f"{log_color}{record.levelname}{self.COLORS['RESET']}"
        return super().format(record)


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging."""

    def format(self, record):
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        if record.exc_info:
            log_entry['exception'] = {
                'type': record.exc_info[0].__name__ if record.exc_info[0] else None,
                'message': str(record.exc_info[1]) if record.exc_info[1] else None,
                'traceback': traceback.format_exception(*record.exc_info)
            }

        for field in EXTRA_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        return json.dumps(log_entry, default=str)


LINE_FORMAT = '[%(asctime)s] %(levelname)-8s [%(name)s:%(lineno)d] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class PlacementLogger:
    """Centralized logging configuration for the placement toolkit."""

    def __init__(self, log_dir: Optional[str] = None):
        self.log_dir = log_dir
        if self.log_dir:
            os.makedirs(self.log_dir, exist_ok=True)

    def _rotating(self, filename: str, formatter: logging.Formatter, level: int,
                  max_file_size: int, backup_count: int) -> logging.Handler:
        handler = logging.handlers.RotatingFileHandler(
            os.path.join(self.log_dir, filename), maxBytes=max_file_size,
            backupCount=backup_count, encoding='utf-8')
        handler.setFormatter(formatter)
        handler.setLevel(level)
        return handler

    def setup_logging(self,
                      log_level: str = "INFO",
                      enable_console: bool = True,
                      enable_file: bool = True,
                      enable_json: bool = True,
                      max_file_size: int = 50 * 1024 * 1024,
                      backup_count: int = 5):
        """Install console and (when a log dir is set) rotating file handlers.

        Writes placement.log, placement.json, errors.log and performance.log;
        the ``performance`` logger never reaches the root handlers.
        """
        level = getattr(logging, log_level.upper(), logging.INFO)
        root = logging.getLogger()
        root.handlers.clear()
        root.setLevel(level)

        perf = logging.getLogger('performance')
        perf.handlers.clear()
        perf.setLevel(logging.INFO)
        perf.propagate = False

        # stdout is reserved for command output
        if enable_console:
            console = logging.StreamHandler(sys.stderr)
            formatter_cls = ColoredFormatter if sys.stderr.isatty() else logging.Formatter
            console.setFormatter(formatter_cls(LINE_FORMAT, datefmt=DATE_FORMAT))
            console.setLevel(level)
            root.addHandler(console)

        if not self.log_dir:
            return

        plain = logging.Formatter(LINE_FORMAT, datefmt=DATE_FORMAT)
        structured = JSONFormatter()
        sizes = dict(max_file_size=max_file_size, backup_count=backup_count)
        if enable_file:
            root.addHandler(self._rotating('placement.log', plain, level, **sizes))
        if enable_json:
            root.addHandler(self._rotating('placement.json', structured, level, **sizes))
        root.addHandler(self._rotating('errors.log', plain, logging.ERROR, **sizes))
        perf.addHandler(self._rotating('performance.log', structured, logging.INFO, **sizes))

        logging.getLogger(__name__).debug(f"File logging enabled in {self.log_dir}")


class LoggerMixin:
    """Mixin class to add logging capabilities to any class."""

    @property
    def logger(self) -> logging.Logger:
        """Get logger for this class."""
        return logging.getLogger(self.__class__.__module__ + '.' + self.__class__.__name__)


def log_performance(operation: str, processing_time: float,
                    additional_data: Optional[dict] = None):
    """Log run timings to the performance logger."""
    perf_logger = logging.getLogger('performance')

    extra_data: Dict[str, Any] = {
        'operation': operation,
        'processing_time': processing_time
    }
    if additional_data:
        extra_data.update(additional_data)

    perf_logger.info(f"Operation completed: {operation}", extra=extra_data)


class ErrorHandler:
    """Centralized error handling for command entry points."""

    @staticmethod
    def handle_command_error(command: str, error: Exception) -> Dict[str, Any]:
        """Log a failed command and build its single-line error payload."""
        logger = logging.getLogger(f'commands.{command}')

        if isinstance(error, PlacementError):
            payload = error.to_dict()
            logger.error(f"Command {command} failed: {error.message}",
                         extra={'error_code': error.code})
        else:
            payload = {'error': 'internal_error', 'message': str(error)}
            logger.error(f"Unexpected error in {command}", exc_info=True)

        payload['command'] = command
        return payload

    @staticmethod
    def exit_status(error: Exception) -> int:
        """Process exit status for an error."""
        if isinstance(error, PlacementError):
            return error.exit_status
        return 1


placement_logger = PlacementLogger()


def setup_default_logging(log_level: Optional[str] = None, log_dir: Optional[str] = None, **options):
    """Setup logging from arguments, falling back to LOG_LEVEL / LOG_DIR.

    ``options`` are passed to PlacementLogger.setup_logging (enable_file,
    enable_json, max_file_size, backup_count).
    """
    load_dotenv()
    log_level = log_level or os.getenv('LOG_LEVEL', 'INFO')
    log_dir = log_dir or os.getenv('LOG_DIR') or None

    global placement_logger
    placement_logger = PlacementLogger(log_dir)
    placement_logger.setup_logging(log_level=log_level, **options)
