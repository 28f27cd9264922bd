from agrimon.mqtt.packets import (
    ConnAck,
    Connect,
    Disconnect,
    Packet,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    StreamDecoder,
    SubAck,
    Subscribe,
    decode_packet,
    encode_packet,
)
from agrimon.mqtt.topics import topic_matches, valid_filter, valid_topic

__all__ = [
    "ConnAck",
    "Connect",
    "Disconnect",
    "Packet",
    "PingReq",
    "PingResp",
    "PubAck",
    "Publish",
    "StreamDecoder",
    "SubAck",
    "Subscribe",
    "decode_packet",
    "encode_packet",
    "topic_matches",
    "valid_filter",
    "valid_topic",
]
