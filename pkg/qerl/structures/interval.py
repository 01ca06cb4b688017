import logging
import math
from dataclasses import dataclass

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interval:
    """A closed, open or half-open real interval. Use from_string() to parse "[0, 1)" style text."""

    low: float
    high: float
    low_closed: bool = True
    high_closed: bool = True

    def contains(self, value: float) -> bool:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        if math.isnan(value):
            return False
        above = value >= self.low if self.low_closed else value > self.low
        below = value <= self.high if self.high_closed else value < self.high
        result = above and below
        logger.debug("Interval check: %s in %s = %s", value, self, result)
        return result

    def clamp(self, value: float) -> float:
        return min(max(value, self.low), self.high)

    @staticmethod
    def from_string(s: str) -> "Interval":
        logger.debug("Parsing interval from string: '%s'", s)
        text = s.strip()
        if len(text) < 5 or text[0] not in "[(" or text[-1] not in "])":
            logger.error("Failed to parse interval from string: '%s'", s)
            raise ValueError(f"Invalid 'Interval' format: '{s}'")
        splits = text[1:-1].split(",")
        if len(splits) != 2:
            logger.error("Failed to parse interval from string: '%s'", s)
            raise ValueError(f"Invalid 'Interval' format: '{s}'")
        try:
            low, high = float(splits[0]), float(splits[1])
        except ValueError as e:
            raise ValueError(f"Invalid 'Interval' bounds: '{s}'") from e
        if low > high:
            raise ValueError(f"Interval lower bound exceeds upper bound: '{s}'")
        return Interval(low, high, text[0] == "[", text[-1] == "]")

    def __str__(self) -> str:
        left = "[" if self.low_closed else "("
        right = "]" if self.high_closed else ")"
        return f"{left}{self.low:g}, {self.high:g}{right}"

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}('{self}')"


UNIT = Interval(0.0, 1.0)
POSITIVE = Interval(0.0, math.inf, low_closed=False)
NON_NEGATIVE = Interval(0.0, math.inf)

__all__ = ["Interval", "UNIT", "POSITIVE", "NON_NEGATIVE"]
