"""Token counting for retrieval budgets.

Real provider tokenizers are not available offline, so the default counter
is a byte heuristic (roughly 4 UTF-8 bytes per token). Anything callable
`str -> int` can be plugged in instead.
"""

from __future__ import annotations

import math
from typing import Callable

TokenCounter = Callable[[str], int]


def heuristic_token_count(text: str) -> int:
    """ceil(utf8_bytes / 4); 0 only for empty text."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def counter_for(tokenizer_id: str) -> TokenCounter:
    if tokenizer_id == "bytes4":
        return heuristic_token_count
    raise ValueError(f"unknown tokenizer: {tokenizer_id!r}")


DEFAULT_TOKENIZER_ID = "bytes4"
