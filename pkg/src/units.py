"""
Unit registry and numeric cell parsing.

Every registered unit maps to a dimension and a factor into that dimension's
base unit (metre, kilogram, or the plain scalar). `conv` is the normalization
applied before numeric comparisons.
"""

import math
import re
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

SCALAR = "scalar"

# unit tag -> (dimension, factor to base unit)
UNIT_REGISTRY: Dict[str, Tuple[str, float]] = {
    # length, base metre
    "m": ("length", 1.0),
    "cm": ("length", 0.01),
    "mm": ("length", 0.001),
    "km": ("length", 1000.0),
    "mi": ("length", 1609.344),
    "ft": ("length", 0.3048),
    "in": ("length", 0.0254),
    # mass, base kilogram
    "kg": ("mass", 1.0),
    "g": ("mass", 0.001),
    "lb": ("mass", 0.45359237),
    # powers of ten
    "k": (SCALAR, 1e3),
    "thousand": (SCALAR, 1e3),
    "M": (SCALAR, 1e6),
    "million": (SCALAR, 1e6),
    "bn": (SCALAR, 1e9),
    "billion": (SCALAR, 1e9),
}

_NUMBER_RE = re.compile(
    r"^\s*(?P<num>[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:[eE][+-]?\d+)?|[+-]?\.\d+)"
    r"\s*(?P<unit>[A-Za-z]+)?\s*$"
)


@dataclass(frozen=True)
class Quantity:
    """A number with an optional registered unit tag."""
    value: float
    unit: Optional[str] = None

    @property
    def dimension(self) -> str:
        return UNIT_REGISTRY[self.unit][0] if self.unit else SCALAR


def is_registered_unit(unit: str) -> bool:
    return unit in UNIT_REGISTRY


def conv(quantity: Quantity) -> Tuple[str, float]:
    """Normalize a quantity to (dimension, value in base unit)."""
    if quantity.unit is None:
        return SCALAR, quantity.value
    dimension, factor = UNIT_REGISTRY[quantity.unit]
    return dimension, quantity.value * factor


def parse_number(text: str) -> Optional[Quantity]:
    """
    Parse a table cell as a number with an optional unit suffix.

    Thousands separators are accepted ("1,200"). A suffix that is not in the
    unit registry makes the cell non-numeric.

    Returns:
        Quantity, or None when the cell is not numeric
    """
    if text is None:
        return None
    match = _NUMBER_RE.match(text)
    if not match:
        return None
    unit = match.group("unit")
    if unit is not None and unit not in UNIT_REGISTRY:
        # case-insensitive fallback, but never fold "M" (million) into "m" (metre)
        lowered = unit.lower()
        if lowered in UNIT_REGISTRY and lowered != "m":
            unit = lowered
        else:
            return None
    value = float(match.group("num").replace(",", ""))
    if not math.isfinite(value):
        return None
    return Quantity(value, unit)


def quantities_equal(a: Quantity, b: Quantity, rel_tol: float = 1e-9) -> bool:
    """
    Equality within unit conversion.

    A unitless side adopts the other side's unit; otherwise both sides must
    share a dimension.
    """
    if a.unit is None and b.unit is not None:
        a = Quantity(a.value, b.unit)
    elif b.unit is None and a.unit is not None:
        b = Quantity(b.value, a.unit)
    dim_a, val_a = conv(a)
    dim_b, val_b = conv(b)
    if dim_a != dim_b:
        return False
    return math.isclose(val_a, val_b, rel_tol=rel_tol, abs_tol=0.0)
