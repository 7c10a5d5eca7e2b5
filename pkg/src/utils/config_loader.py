"""Configuration loader utility for the adaptive MRAG engine."""

import copy
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import yaml
from dotenv import load_dotenv

from .errors import ConfigError

REQUIRED_SECTIONS = ['embedder', 'generator', 'retrieval', 'router', 'processing']


class ConfigLoader:
    """Handles loading and validation of configuration from YAML files."""

    def __init__(self, config_path: Optional[str] = None):
        """Initialize the config loader.

        Args:
            config_path: Path to the configuration file. If None, uses default path.
        """
        if config_path is None:
            # Default to config/config.yaml relative to project root
            project_root = Path(__file__).parent.parent.parent
            config_path = project_root / "config" / "config.yaml"

        self.config_path = Path(config_path)
        self._config: Optional[Dict[str, Any]] = None

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file.

        Returns:
            Dictionary containing configuration data.

        Raises:
            ConfigError: If the file is missing, malformed, or not a mapping.
        """
        if not self.config_path.exists():
            raise ConfigError(f"Configuration file not found: {self.config_path}")

        # Values such as the generator token may live in a local .env file
        load_dotenv()

        try:
            with open(self.config_path, 'r', encoding='utf-8') as file:
                loaded = yaml.safe_load(file)
        except yaml.YAMLError as e:
            raise ConfigError(f"Error parsing configuration file: {e}")

        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Configuration root must be a mapping: {self.config_path}")

        self._config = loaded
        return self._config

    def get_config(self) -> Dict[str, Any]:
        """Get the loaded configuration.

        Raises:
            RuntimeError: If configuration hasn't been loaded yet.
        """
        if self._config is None:
            raise RuntimeError("Configuration not loaded. Call load_config() first.")
        return self._config

    def get_section(self, section_name: str) -> Dict[str, Any]:
        """Get a specific configuration section.

        Raises:
            KeyError: If section doesn't exist.
        """
        config = self.get_config()
        if section_name not in config:
            raise KeyError(f"Configuration section '{section_name}' not found.")
        return config[section_name] or {}

    def validate_required_sections(self, required_sections: Iterable[str]) -> None:
        """Validate that all required configuration sections exist.

        Raises:
            ConfigError: If any required section is missing.
        """
        config = self.get_config()
        missing_sections = [section for section in required_sections if section not in config]

        if missing_sections:
            raise ConfigError(f"Missing required configuration sections: {missing_sections}")

    def substitute_env_vars(self) -> None:
        """Substitute environment variables in configuration values."""
        if self._config is None:
            return

        self._config = self._substitute_env_vars_recursive(self._config)

    def _substitute_env_vars_recursive(self, obj: Any) -> Any:
        """Recursively substitute environment variables in configuration."""
        if isinstance(obj, dict):
            return {k: self._substitute_env_vars_recursive(v) for k, v in obj.items()}
        elif isinstance(obj, list):
            return [self._substitute_env_vars_recursive(item) for item in obj]
        elif isinstance(obj, str):
            return os.path.expandvars(obj)
        else:
            return obj

    def apply_overrides(self, overrides: List[str]) -> None:
        """Apply ``section.key=value`` overrides; values are parsed as YAML scalars.

        Args:
            overrides: Override expressions, e.g. ``retrieval.k=5``.
        """
        config = self.get_config()
        for expression in overrides:
            if '=' not in expression:
                raise ConfigError(f"Override must look like section.key=value: {expression!r}")
            dotted, raw_value = expression.split('=', 1)
            keys = [key for key in dotted.strip().split('.') if key]
            if not keys:
                raise ConfigError(f"Override has an empty key: {expression!r}")
            try:
                value = yaml.safe_load(raw_value)
            except yaml.YAMLError as e:
                raise ConfigError(f"Override value for {dotted!r} is not valid YAML: {e}")

            node = config
            for key in keys[:-1]:
                child = node.get(key)
                if child is None:
                    child = {}
                    node[key] = child
                if not isinstance(child, dict):
                    raise ConfigError(f"Override path {dotted!r} crosses a non-mapping value")
                node = child
            node[keys[-1]] = value


# Global config instance
_config_loader: Optional[ConfigLoader] = None


def get_config_loader(config_path: Optional[str] = None,
                      overrides: Optional[List[str]] = None) -> ConfigLoader:
    """Get the global configuration loader instance.

    Args:
        config_path: Path to configuration file. Only used on first call.
        overrides: ``section.key=value`` expressions applied after loading.

    Returns:
        ConfigLoader instance.
    """
    global _config_loader
    if _config_loader is None:
        loader = ConfigLoader(config_path)
        loader.load_config()
        loader.substitute_env_vars()
        loader.apply_overrides(overrides or [])
        loader.validate_required_sections(REQUIRED_SECTIONS)
        _config_loader = loader

    return _config_loader


def reset_config_loader() -> None:
    """Forget the global loader so the next call reloads from disk."""
    global _config_loader
    _config_loader = None


def get_config() -> Dict[str, Any]:
    """Get a deep copy of the loaded configuration."""
    return copy.deepcopy(get_config_loader().get_config())


def get_config_section(section_name: str) -> Dict[str, Any]:
    """Get a specific configuration section."""
    return get_config_loader().get_section(section_name)
