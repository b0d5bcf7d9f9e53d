import hashlib
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any

from src.config import get_settings


PROJECT_ROOT = Path(os.path.dirname(os.path.abspath(__file__))) / '..'


def _log_dir() -> Path:
    configured = get_settings().LOG_DIR
    return Path(configured) if configured else PROJECT_ROOT / 'logs'


def setup_logging():
    """
    Sets up a centralized logging configuration for the application.
    Logs to console and a daily file.
    """
    logger = logging.getLogger('archtree')
    logger.setLevel(logging.DEBUG)

    if not logger.handlers:
        c_handler = logging.StreamHandler()
        c_handler.setLevel(getattr(logging, get_settings().LOG_LEVEL.upper(), logging.INFO))
        c_format = logging.Formatter('%(name)s - %(levelname)s - %(message)s')
        c_handler.setFormatter(c_format)
        logger.addHandler(c_handler)

        try:
            log_dir = _log_dir()
            log_dir.mkdir(parents=True, exist_ok=True)
            log_file_name = datetime.now().strftime('archtree_%Y-%m-%d.log')
            f_handler = logging.FileHandler(log_dir / log_file_name)
            f_handler.setLevel(logging.DEBUG) # more verbosely to file for debugging
            f_format = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s')
            f_handler.setFormatter(f_format)
            logger.addHandler(f_handler)
        except OSError as e:
            # read-only checkouts still get console logging
            logger.warning(f"File logging disabled: {e}")

    return logger

logger = setup_logging()


def derive_seed(run_seed: int, node_id: int, salt: str = "") -> int:
    """Stable per-node seed, independent of worker scheduling and of PYTHONHASHSEED."""
    digest = hashlib.blake2b(f"{run_seed}:{node_id}:{salt}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def _to_serializable(value: Any) -> Any:
    if hasattr(value, 'model_dump'):
        return value.model_dump(mode='json')
    if isinstance(value, dict):
        return {k: _to_serializable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_serializable(v) for v in value]
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, Path):
        return str(value)
    return value


def save_json(data: Any, filepath: Path) -> Path:
    """Saves a pydantic model, a dict of models or plain data to a JSON file."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(_to_serializable(data), f, indent=2)
    logger.info(f"Saved {filepath}")
    return filepath


def load_json(filepath: Path) -> Any:
    """Loads a JSON file back into Python data. Missing files raise FileNotFoundError."""
    with open(filepath, 'r', encoding='utf-8') as f:
        loaded_data = json.load(f)
    logger.debug(f"Loaded {filepath}")
    return loaded_data
