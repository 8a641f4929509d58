"""Configuration objects"""
from __future__ import annotations

import copy
import tomllib
from typing import Any

from .general import LOGGER, ConfigurationError, TypeJSON


class Config:
    """Settings whose defaults are set as attributes in __init__.

    Subclasses set their attributes first and call ``super().__init__``.
    """

    def __init__(self, **kwargs: Any) -> None:
        self.update(**kwargs)

    def update(self, **kwargs: Any) -> None:
        # Walk through kwargs and apply values whose names exist as attributes.
        # None means "not given" so command line flags left unset don't clobber.
        for attr in kwargs:
            if kwargs[attr] is None:
                continue
            if hasattr(self, attr):
                setattr(self, attr, kwargs[attr])
            else:
                LOGGER.debug(f"{type(self).__name__}: ignoring unknown setting {attr}")
        self.check()

    def check(self) -> None:
        """Raise ConfigurationError on invalid values."""

    def copy(self) -> Any:
        return copy.deepcopy(self)

    def to_json(self) -> TypeJSON:
        return {
            k: (v.to_json() if hasattr(v, "to_json") else v)
            for k, v in vars(self).items()
            if not k.startswith("_")
        }


def load_toml(path: str) -> TypeJSON:
    """Parse a TOML file; decode errors become ConfigurationError."""
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f'Could not parse "{path}": {e}') from e
    except OSError as e:
        raise ConfigurationError(f'Could not read config "{path}": {e}') from e


def table(data: TypeJSON, name: str) -> TypeJSON:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    return value
