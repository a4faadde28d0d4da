"""Message passing over emulated reliable queue pairs with automatic aggregation."""

from .config import Config, load_config, parse_config
from .core import Node, init, local_cluster
from .counters import CounterSet, snapshot_counters
from .errors import DXNetError
from .model import Message, MessageHeader, MessageType

__all__ = [
    "Config", "CounterSet", "DXNetError", "Message", "MessageHeader", "MessageType", "Node",
    "init", "load_config", "local_cluster", "parse_config", "snapshot_counters",
]
