import json
import logging
import os
from tenacity import retry
from tenacity.retry import retry_if_exception_type
from tenacity.wait import wait_fixed
from tenacity.stop import stop_after_attempt
from petsr import config

logger = logging.getLogger(__name__)


class PetsrError(Exception):
    """Base class of the errors raised by petsr"""


class VolumeFormatError(PetsrError, ValueError):
    """Missing or corrupt sidecar, raw data of the wrong length, non-finite values"""


class GeometryError(PetsrError, ValueError):
    """Scanner geometry inconsistent with the image or the reconstruction settings"""


class ConfigError(PetsrError, ValueError):
    """Invalid study, solver or network configuration"""


class ShapeError(PetsrError, ValueError):
    """Tensor or image shapes/channels that do not match"""


class ConvergenceError(PetsrError, RuntimeError):
    """Line search could not find a decrease; `result` holds the last accepted iterate"""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def configure_logging(level='INFO'):
    logging.basicConfig(format=config.log_format, datefmt=config.log_datefmt, level=level)


def ensure_folder(folder: str) -> str:
    if not os.path.exists(folder):
        logger.info("creating folder %s", folder)
        os.makedirs(folder)
    return folder


@retry(retry=retry_if_exception_type(OSError), stop=stop_after_attempt(2), wait=wait_fixed(1), reraise=True)
def write_bytes(file_name: str, data: bytes):
    with open(file_name, 'wb') as f:
        f.write(data)


@retry(retry=retry_if_exception_type(OSError), stop=stop_after_attempt(2), wait=wait_fixed(1), reraise=True)
def write_text(file_name: str, data: str):
    with open(file_name, 'w', encoding='UTF-8') as f:
        f.write(data)


def write_json(file_name: str, obj):
    logger.info('writing file %s', file_name)
    write_text(file_name, json.dumps(obj, indent=2, sort_keys=True) + '\n')


def read_json(file_name: str):
    with open(file_name, encoding='UTF-8') as f:
        return json.load(f)


def error_payload(ex: Exception) -> str:
    """Single-line machine readable description of a failure"""
    return json.dumps({'error': type(ex).__name__, 'message': str(ex)})
