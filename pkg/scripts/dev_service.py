#!/usr/bin/env python3
"""Serve random desk-scale weights for frontend development and socket tests.

Frame pacing, protocol, and control round-tripping behave exactly like a
trained service; only the pixels are untrained noise.
"""

import argparse

import numpy as np

from aapt import service
from aapt.backbone import Backbone
from aapt.codec import Codec
from aapt.config import RunConfig
from aapt.world import ScaleStats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--fps", type=float, default=4.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = RunConfig()
    ctx = service.ServiceContext(
        backbone=Backbone(cfg.backbone_config(), seed=args.seed),
        codec=Codec(cfg.codec_config(), seed=args.seed),
        stats=ScaleStats(std=np.array([3.4, 3.4, 0.05, 0.05], dtype=np.float32)),
        frame_h=cfg.frame_h,
        frame_w=cfg.frame_w,
        temporal_factor=cfg.temporal_factor,
        target_fps=args.fps,
    )

    async def run():
        import asyncio

        ready = asyncio.Event()

        async def announce():
            await ready.wait()
            print(f"serving on ws://127.0.0.1:{args.port}", flush=True)

        import asyncio as aio

        task = aio.create_task(announce())
        await service.run_service(ctx, args.port, ready=ready)
        await task

    import asyncio

    asyncio.run(run())


if __name__ == "__main__":
    main()
