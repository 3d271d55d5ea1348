"""Entry point for one node process: ``python -m chainiot.node <node.json>``."""

from __future__ import annotations

import logging
import sys

from .noderuntime import NodeConfig, run_node


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m chainiot.node <node.json>", file=sys.stderr)
        return 1
    cfg = NodeConfig.load(argv[0])
    logging.basicConfig(level=logging.INFO, format=f"%(asctime)s {cfg.name} %(levelname)s %(name)s: %(message)s")
    if cfg.kind == "orderer":
        from .ordering.service import OrdererNode as Node
    elif cfg.kind == "peer":
        from .gateway.node import PeerNode as Node
    else:
        print(f"unknown node kind {cfg.kind!r}", file=sys.stderr)
        return 1
    node = None

    async def start():
        nonlocal node
        node = Node(cfg)
        await node.start()

    async def stop():
        if node is not None:
            await node.stop()

    run_node(start, stop)
    return 0


if __name__ == "__main__":
    sys.exit(main())
