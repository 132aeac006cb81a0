"""Small builders shared by the server, client and bench tests."""
from __future__ import annotations

from cdtl.anatomize import anatomize
from cdtl.client import Client
from cdtl.dtree import LearnParams
from cdtl.server import Server
from cdtl.transport import LoopbackTransport


def setup(ds, key, l=2, params=LearnParams(), prune_fraction=0.2, prune_seed=0, train=True, seed=0):
    it, st = anatomize(ds, l, key, seed)
    server = Server(it, st, ds.schema, params=params, prune_fraction=prune_fraction, prune_seed=prune_seed)
    if train:
        server.train_base()
    client = Client(LoopbackTransport(server), key, ds.schema, params)
    return server, client


def instance(ds, row):
    """A test tuple as the client holds it: every attribute except the class."""
    return {n: v for n, v in zip(ds.schema.names, row) if n != ds.schema.class_attr}
