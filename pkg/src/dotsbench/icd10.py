"""ICD-10 code normalization and deterministic matching.

Codes are compared in a canonical form (uppercase, dots and whitespace
stripped). A predicted code matches an expected one when the canonical
forms are equal, or when the expected code names only a 3-character
category (no subcategory digits) and the predicted code falls inside it.
No model calls happen here; matching must be reproducible bit-for-bit.
"""

from __future__ import annotations

import re

from .errors import MalformedCode

# Letter, two digits, then up to four alphanumeric subcategory characters
# (canonical form, dots already removed).
_CODE_RE = re.compile(r"^[A-Z][0-9]{2}[A-Z0-9]{0,4}$")


def normalize_icd10(code: str) -> str:
    """Canonicalize an ICD-10 code: uppercase, strip dots and whitespace.

    Raises:
        MalformedCode: if the result does not look like an ICD-10 code.
    """
    norm = re.sub(r"[.\s]", "", code.strip().upper())
    if not _CODE_RE.match(norm):
        raise MalformedCode(f"not an ICD-10 code: {code!r}")
    return norm


def is_valid_icd10(code: str) -> bool:
    try:
        normalize_icd10(code)
    except MalformedCode:
        return False
    return True


def category_of(code: str) -> str:
    """3-character category of a canonical code (e.g. 'N390' -> 'N39')."""
    return normalize_icd10(code)[:3]


def match_icd10(predicted: str, expected: list[str]) -> bool:
    """True iff ``predicted`` matches any code in ``expected``.

    Exact equality always matches. The category-prefix rule applies only
    in one direction: an expected bare category (e.g. "N39") accepts any
    predicted code within it ("N39.0"), but an expected specific code
    ("N39.0") is not satisfied by a bare category prediction ("N39").

    Raises:
        MalformedCode: if any side fails normalization.
    """
    pred = normalize_icd10(predicted)
    for exp_raw in expected:
        exp = normalize_icd10(exp_raw)
        if pred == exp:
            return True
        if len(exp) == 3 and pred[:3] == exp:
            return True
    return False
