"""Topic name and topic filter syntax, plus wildcard matching."""

from agrimon.kernels import topic_matches


def valid_topic(topic: str) -> bool:
    """Topic names are non-empty, at most 65535 octets and wildcard-free."""
    if not topic or "+" in topic or "#" in topic or "\x00" in topic:
        return False
    return len(topic.encode("utf-8")) <= 0xFFFF


def valid_filter(topic_filter: str) -> bool:
    if not topic_filter or "\x00" in topic_filter:
        return False
    if len(topic_filter.encode("utf-8")) > 0xFFFF:
        return False
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            return False
        if "+" in level and level != "+":
            return False
    return True


__all__ = ["topic_matches", "valid_filter", "valid_topic"]
