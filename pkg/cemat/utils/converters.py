def to_bool(value) -> bool:
    """attrs converter accepting booleans and their usual spellings in config files."""
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"Not a boolean: {value}")
    return bool(value)


def to_floats(value) -> tuple:
    """Tuple of floats from a sequence or a string like `[0.2, 0.5]` or `0.2,0.5`."""
    if isinstance(value, str):
        value = [v for v in value.replace("[", "").replace("]", "").replace("(", "").replace(")", "").split(",") if v.strip()]
    return tuple(float(v) for v in value)


def to_range(value) -> tuple:
    low, high = to_floats(value)
    return (low, high)
