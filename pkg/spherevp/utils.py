import json
import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

from spherevp.errors import DatasetIOError

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Singleton(type):
    _instances = {}

    def __call__(cls, *args, **kwargs):
        if cls not in cls._instances:
            cls._instances[cls] = super(Singleton, cls).__call__(*args, **kwargs)
        return cls._instances[cls]


class Settings(metaclass=Singleton):
    """Process-wide settings read from the environment (and a .env file)."""

    def __init__(self):
        threads = os.getenv("SPHERE_VP_THREADS")
        self.threads = max(1, int(threads)) if threads else (os.cpu_count() or 1)
        self.log_level = os.getenv("SPHERE_VP_LOG_LEVEL", "INFO").upper()


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(level=level or Settings().log_level, format=LOG_FORMAT)


def read_json_file(file_path: Union[str, Path]) -> Any:
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DatasetIOError(f"File not found: {file_path}") from e
    except json.JSONDecodeError as e:
        raise DatasetIOError(f"Invalid JSON in {file_path}: {e}") from e


def write_text_file(file_path: Union[str, Path], text: str):
    file_path = Path(file_path)
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(f"Could not write {file_path}: {e}") from e


def write_json_file(file_path: Union[str, Path], data: Any):
    write_text_file(file_path, json.dumps(data, ensure_ascii=False, indent=2))
