from qgrid.pubsub.core import Broker, Client, Message, Receipt
from qgrid.pubsub.inprocess import FaultInjector, Network, Transmission
from qgrid.pubsub.packets import Packet, PacketType

DEFAULT_PORT = 1883

__all__ = [
    "Broker",
    "Client",
    "DEFAULT_PORT",
    "FaultInjector",
    "Message",
    "Network",
    "Packet",
    "PacketType",
    "Receipt",
    "Transmission",
]
