import os
import json
import logging
from pathlib import Path
from typing import Dict, Any, Optional
from dotenv import load_dotenv

logger = logging.getLogger()


def _default_socket_path() -> str:
    runtime_dir = os.environ.get('XDG_RUNTIME_DIR')
    if runtime_dir and os.path.isdir(runtime_dir):
        return os.path.join(runtime_dir, 'm3server.sock')
    return os.path.join('/tmp', f"m3server-{os.getuid()}.sock")


class Config:
    """Centralized configuration management for the m3fast toolchain.

    Supports loading configuration from:
    - Environment variables
    - .env files
    """

    _instance = None

    def __new__(cls):
        """Implement singleton pattern."""
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        """Initialize the configuration system."""
        if self._initialized:
            return

        self._config = {}
        self._load_environment()
        self._initialized = True

    def _load_environment(self):
        """Load configuration from environment variables and .env files."""
        env_path = Path(os.getcwd()) / '.env'
        if env_path.exists():
            logger.info(f"Loading configuration from {env_path}")
            load_dotenv(dotenv_path=env_path)

        self._config['environment'] = os.environ.get('M3_ENV', 'dev')
        self._config['log_level'] = os.environ.get('LOG_LEVEL', 'INFO')

        self._config['server'] = {
            'socket': os.environ.get('M3SERVER_SOCKET') or _default_socket_path(),
            'cache_bytes': self._int_from_env('M3_CACHE_BYTES', None),
            'connect_attempts': self._int_from_env('M3_CONNECT_ATTEMPTS', 1),
        }

        self._config['build'] = {
            'dir': os.environ.get('M3_BUILD_DIR', 'build'),
            'backend': os.environ.get('M3_BACKEND', 'integrated'),
        }

        self._config['vm'] = {
            'stack_words': self._int_from_env('M3_STACK_WORDS', 65536),
        }

    @staticmethod
    def _int_from_env(name: str, default: Optional[int]) -> Optional[int]:
        raw = os.environ.get(name)
        if raw is None or raw == '':
            return default
        try:
            return int(raw)
        except ValueError:
            logger.error(f"Failed to parse {name} environment variable as an integer: {raw!r}")
            return default

    def reload(self):
        """Re-read the environment (tests change M3SERVER_SOCKET and friends)."""
        self._config = {}
        self._load_environment()

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value by key.

        Args:
            key: The configuration key in dot notation (e.g., 'server.socket')
            default: Default value if key is not found

        Returns:
            The configuration value or default
        """
        keys = key.split('.')
        value = self._config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        if value is None:
            return default
        return value

    def get_all(self) -> Dict[str, Any]:
        """Get all configuration values as a detached copy."""
        return json.loads(json.dumps(self._config))


# Create a singleton instance
config = Config()
