#!/usr/bin/env python3
"""
Aulos Verifier Web Server
FastAPI mirror of a verifier node's sensor feed, for dashboards and manual checks.
The detector itself talks to neighbors over the line protocol in core.verifier.
"""

import os
import sys
from pathlib import Path
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

# Add parent to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from core import __version__
from core.verifier import ReplayClock, SensorFeed, load_sensor_log

# ============================================
# CONFIG
# ============================================

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 8003
FEED_ENV = "AULOS_FEED"

# ============================================
# MODELS
# ============================================

class HealthResponse(BaseModel):
    status: str
    source: str
    sensors: int
    readings: int
    version: str


class SensorInfo(BaseModel):
    name: str
    readings: int
    first: Optional[float] = None
    last: Optional[float] = None


class ReadingResponse(BaseModel):
    sensor: str
    value: float
    timestamp: float
    source: str

# ============================================
# APP
# ============================================

def create_app(feed: SensorFeed, clock: Optional[ReplayClock] = None) -> FastAPI:
    """App serving `feed`; without `at`, readings follow the replay clock (latest if none)."""
    clock = clock or ReplayClock(speed=0)
    app = FastAPI(
        title="Aulos Verifier",
        description="Sensor feed of one verifier node",
        version=__version__,
    )

    # ============================================
    # ROUTES
    # ============================================

    @app.get("/api/health", response_model=HealthResponse)
    async def health():
        return HealthResponse(
            status="ok",
            source=feed.source,
            sensors=len(feed.sensors()),
            readings=len(feed),
            version=__version__,
        )

    @app.get("/api/sensors", response_model=List[SensorInfo])
    async def list_sensors():
        result = []
        for name in feed.sensors():
            readings = feed.readings(name)
            result.append(SensorInfo(
                name=name,
                readings=len(readings),
                first=readings[0].timestamp if readings else None,
                last=readings[-1].timestamp if readings else None,
            ))
        return result

    @app.get("/api/sensors/{name}", response_model=ReadingResponse)
    async def read_sensor(name: str, at: Optional[float] = None):
        if name not in feed:
            raise HTTPException(status_code=404, detail=f"unknown sensor '{name}'")
        reading = feed.latest(name, at if at is not None else clock.now())
        if reading is None:
            raise HTTPException(status_code=404, detail=f"no {name} reading at or before {at}")
        return ReadingResponse(
            sensor=reading.sensor,
            value=reading.value,
            timestamp=reading.timestamp,
            source=reading.source,
        )

    return app


def app_from_env() -> FastAPI:
    path = os.environ.get(FEED_ENV)
    if not path:
        raise RuntimeError(f"set {FEED_ENV} to a sensor log")
    return create_app(load_sensor_log(path))


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app_from_env(), host=DEFAULT_HOST, port=DEFAULT_PORT)
