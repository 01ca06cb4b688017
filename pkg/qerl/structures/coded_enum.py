import logging
from enum import Enum
from typing import Type, TypeVar

logger = logging.getLogger(__name__)

E = TypeVar("E", bound="CodedEnum")


class CodedEnum(Enum):
    """Closed enumeration with a stable integer code and an upper-camel string form."""

    @property
    def code(self) -> int:
        return int(self.value)

    @classmethod
    def from_name(cls: Type[E], name: str) -> E:
        try:
            return cls[name]
        except KeyError as e:
            logger.error("Unknown %s name: '%s'", cls.__name__, name)
            raise ValueError(f"'{name}' is not a valid {cls.__name__}") from e

    @classmethod
    def from_code(cls: Type[E], code: int) -> E:
        for member in cls:
            if member.code == code:
                return member
        logger.error("Unknown %s code: %s", cls.__name__, code)
        raise ValueError(f"{code} is not a valid {cls.__name__} code")

    @classmethod
    def size(cls) -> int:
        return len(cls.__members__)

    def __str__(self) -> str:
        return self.name


__all__ = ["CodedEnum"]
