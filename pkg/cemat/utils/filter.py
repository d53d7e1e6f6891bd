import re
from typing import Iterable, List, Union


def filter(items: Iterable[str], query: Union[str, List[str]]) -> List[str]:
    """Filter items in list.

    Filters items using full match, substring match and regex match.

    Args:
        items (Iterable[str]): Input names.
        query (Union[str, List[str]]): Filter expressions.

    Returns:
        List[str]: Matching items, in input order.
    """

    items = list(items)
    matches = set()
    if isinstance(query, str):
        query = [query]
    for query_item in query:
        # Full match
        matches |= {item for item in items if query_item == item}

        # Substring match
        matches |= {item for item in items if query_item in item}

        # Regular expression match
        try:
            regex = re.compile(query_item, re.IGNORECASE)
        except re.error:
            continue
        matches |= {item for item in items if regex.search(item)}
    return [item for item in items if item in matches]
