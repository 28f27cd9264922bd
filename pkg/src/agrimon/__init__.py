"""Desk-scale environmental monitoring network: sensor codecs, node agents,
simulated multi-protocol star links, an MQTT 3.1.1 subset, a deduplicating
gateway and an append-only telemetry store."""

__version__ = "0.1.0"
