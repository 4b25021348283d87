from fastapi import FastAPI, HTTPException
from contextlib import asynccontextmanager
from typing import Literal, Optional
import asyncio
import logging
import os
import time

import uvicorn
from dotenv import load_dotenv
from pydantic import BaseModel, Field

# === BASE DIR ===
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

from system_guard import ConfigError
from tools.auth_protocol import (
    DEFAULT_MAX_FRAME,
    INSERT_AFTER_DECRYPT,
    DeviceRegistry,
    ServerKeyPair,
    ServerState,
    parse_endpoint,
    start_auth_server,
)
from tools.openset_classifier import load_manifest
from tools.replay_filter import load_or_create

load_dotenv(os.path.join(BASE_DIR, ".env"))
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

DEFAULT_LISTEN = "127.0.0.1:9400"
DEFAULT_ADMIN_PORT = 9401


# === Settings ===
class ServerSettings(BaseModel):
    model_path: Optional[str] = None
    filter_path: Optional[str] = None
    key_path: Optional[str] = None
    listen: Optional[str] = DEFAULT_LISTEN
    admin_host: str = "127.0.0.1"
    admin_port: int = DEFAULT_ADMIN_PORT
    max_frame: int = Field(default=DEFAULT_MAX_FRAME, ge=16)
    snapshot_seconds: float = Field(default=30.0, gt=0)
    insert_policy: Literal["after_decrypt", "after_accept"] = INSERT_AFTER_DECRYPT

    @classmethod
    def from_env(cls, **overrides) -> "ServerSettings":
        env = {
            "model_path": os.getenv("PUFAUTH_MODEL"),
            "filter_path": os.getenv("PUFAUTH_FILTER"),
            "key_path": os.getenv("PUFAUTH_KEY"),
            "listen": os.getenv("PUFAUTH_LISTEN"),
            "admin_port": os.getenv("PUFAUTH_ADMIN_PORT"),
            "max_frame": os.getenv("PUFAUTH_MAX_FRAME"),
            "snapshot_seconds": os.getenv("PUFAUTH_SNAPSHOT_SECONDS"),
            "insert_policy": os.getenv("PUFAUTH_INSERT_POLICY"),
        }
        merged = {k: v for k, v in env.items() if v}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(merged)


def build_server_state(settings: ServerSettings) -> ServerState:
    if not settings.model_path:
        raise ConfigError(["PUFAUTH_MODEL: a model manifest path is required"])
    model, extra = load_manifest(settings.model_path)
    registry = DeviceRegistry.from_dict(extra.get("registry", {}))
    key_path = settings.key_path or os.path.join(os.path.dirname(os.path.abspath(settings.model_path)), "server_key.pem")
    keypair = ServerKeyPair.load(key_path)
    if registry.pk_fingerprint and registry.pk_fingerprint != keypair.fingerprint():
        raise ConfigError([f"PUFAUTH_KEY: {key_path} does not match the key devices were provisioned with"])
    replay_filter = load_or_create(settings.filter_path)
    logging.info(f"Loaded model {settings.model_path}: {len(registry)} devices, tau={model.tau:.4f}")
    return ServerState(keypair, replay_filter, model, registry, settings.insert_policy)


# === Snapshot loop ===
async def snapshot_loop(state: ServerState, path: str, interval: float):
    loop = asyncio.get_running_loop()
    last_count = state.filter.n_inserted
    while True:
        await asyncio.sleep(interval)
        if state.filter.n_inserted == last_count:
            continue
        try:
            await loop.run_in_executor(None, state.filter.snapshot, path)
            last_count = state.filter.n_inserted
        except OSError as e:
            logging.warning(f"Filter snapshot failed: {e}")


def create_app(settings: Optional[ServerSettings] = None, state: Optional[ServerState] = None) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        cfg = app.state.settings or ServerSettings.from_env()
        app.state.settings = cfg
        if app.state.server_state is None:
            app.state.server_state = build_server_state(cfg)
        server_state = app.state.server_state

        listener = None
        if cfg.listen:
            host, port = parse_endpoint(cfg.listen)
            listener = await start_auth_server(server_state, host, port, cfg.max_frame)
            app.state.listen_address = listener.sockets[0].getsockname()
        snapshot_task = None
        if cfg.filter_path:
            snapshot_task = asyncio.create_task(snapshot_loop(server_state, cfg.filter_path, cfg.snapshot_seconds))
        app.state.started_at = time.time()
        try:
            yield
        finally:
            if snapshot_task:
                snapshot_task.cancel()
            if listener:
                listener.close()
                await listener.wait_closed()
            if cfg.filter_path:
                server_state.filter.snapshot(cfg.filter_path)
            logging.info("Authentication server stopped")

    app = FastAPI(lifespan=lifespan)
    app.state.settings = settings
    app.state.server_state = state
    app.state.listen_address = None
    app.state.started_at = None

    def current_state() -> ServerState:
        if app.state.server_state is None:
            raise HTTPException(status_code=503, detail="Server state not loaded")
        return app.state.server_state

    @app.get("/")
    def root():
        return {"status": "PUF authentication server is online."}

    @app.get("/status")
    def status():
        s = current_state()
        address = app.state.listen_address
        return {
            "status": "success",
            "listen": f"{address[0]}:{address[1]}" if address else None,
            "uptime_s": round(time.time() - app.state.started_at, 1) if app.state.started_at else None,
            **s.stats(),
        }

    @app.get("/filter/stats")
    def filter_stats():
        return {"status": "success", **current_state().filter.stats()}

    @app.post("/filter/snapshot")
    async def filter_snapshot():
        s = current_state()
        path = app.state.settings.filter_path if app.state.settings else None
        if not path:
            raise HTTPException(status_code=400, detail="No filter path configured (PUFAUTH_FILTER)")
        size = await asyncio.get_running_loop().run_in_executor(None, s.filter.snapshot, path)
        return {"status": "success", "path": path, "bytes": size, "n_inserted": s.filter.n_inserted}

    # 🩺 System Health Check
    @app.get("/system_check")
    def system_check():
        s = current_state()
        checks = {
            "model_loaded": s.model is not None,
            "devices_enrolled": len(s.registry) >= 2,
            "key_matches_registry": (not s.registry.pk_fingerprint
                                     or s.registry.pk_fingerprint == s.keypair.fingerprint()),
            "filter_within_design_load": not s.filter.saturated,
            "listener_running": app.state.listen_address is not None,
        }
        ok = all(checks.values())
        return {"status": "success" if ok else "error", "checks": checks}

    return app


app = create_app()


def serve(settings: Optional[ServerSettings] = None):
    """Blocking: admin HTTP surface plus the framed authentication listener."""
    settings = settings or ServerSettings.from_env()
    uvicorn.run(create_app(settings), host=settings.admin_host, port=settings.admin_port, log_level="info")


if __name__ == "__main__":
    serve()
