import asyncio
import dataclasses
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from cryptography.exceptions import InvalidTag

from tools.auth_protocol import (
    DEFAULT_MAX_FRAME,
    INSERT_AFTER_ACCEPT,
    INSERT_AFTER_DECRYPT,
    AesGcmCipher,
    AuthRequest,
    AuthResponse,
    DeviceRegistry,
    ServerKeyPair,
    ServerState,
    build_auth_request,
    encode_frame,
    enroll_fleet,
    exchange,
    execute,
    handle_auth_request,
    key_fingerprint,
    load_provisioning,
    new_session_key,
    parse_endpoint,
    process_frame,
    run_device,
    seal_image,
    start_auth_server,
    wire_overhead,
    write_provisioning,
)
from tools.errors import ProtocolError, RegistryConflict
from tools.imaging import PufImage, to_model_input
from tools.openset_classifier import authenticate_image
from tools.replay_filter import BloomFilter


def image_bytes(state, seed=0):
    return np.random.default_rng(seed).integers(0, 256, state.width * state.height, dtype=np.uint8).tobytes()


def with_policy(state, policy, tau=None, filter_=None):
    model = state.model if tau is None else dataclasses.replace(state.model, tau=tau)
    return ServerState(state.keypair, filter_ or BloomFilter.for_capacity(1000, 1e-4, seeds=(1, 2)),
                       model, state.registry, insert_policy=policy)


def predicted_claim(state, keypair, payload):
    """Seal payload under the id of the device the model predicts for it."""
    bb = state.model.backbone
    x = to_model_input(PufImage.from_bytes(payload, state.width, state.height), bb.norm_mean, bb.norm_std)
    label = authenticate_image(state.model, x, 0).predicted
    return seal_image(state.registry.device_of(label), payload, keypair.public_key)


class TestWireFormat:
    def test_reference_image_fits_in_one_small_request(self, keypair):
        w = wire_overhead(50, 50, keypair)
        assert w["m2_bytes"] == 256
        assert w["m1_bytes"] == 12 + 2500 + 16
        assert w["request_bytes"] == 7 + 256 + 4 + w["m1_bytes"]
        assert w["request_bytes"] <= 4096
        assert w["framed_bytes"] == w["request_bytes"] + 4

    def test_image_never_travels_in_clear(self, keypair):
        img = np.random.default_rng(0).integers(0, 256, 2500, dtype=np.uint8).tobytes()
        body = seal_image(3, img, keypair.public_key).to_bytes()
        assert img not in body
        assert img[:64] not in body

    def test_request_parses_back(self, keypair):
        req = seal_image(77, b"\x01" * 16, keypair.public_key)
        assert AuthRequest.from_bytes(req.to_bytes()) == req
        assert req.frame()[:4] == struct.pack(">I", len(req.to_bytes()))

    def test_malformed_requests(self):
        good = AuthRequest(5, b"m1-bytes", b"m2").to_bytes()
        with pytest.raises(ProtocolError):
            AuthRequest.from_bytes(good[:5])
        with pytest.raises(ProtocolError):
            AuthRequest.from_bytes(b"\x09" + good[1:])
        with pytest.raises(ProtocolError):
            AuthRequest.from_bytes(good[:8])
        with pytest.raises(ProtocolError):
            AuthRequest.from_bytes(good + b"extra")
        with pytest.raises(ProtocolError):
            AuthRequest(2**32, b"", b"").to_bytes()

    def test_response_frame(self):
        frame = AuthResponse.reject("replay").frame()
        (length,) = struct.unpack(">I", frame[:4])
        parsed = AuthResponse.model_validate_json(frame[4:4 + length])
        assert (parsed.verdict, parsed.reason, parsed.p_open) == ("reject", "replay", None)


class TestCipher:
    def test_gcm_binds_associated_data(self):
        cipher = AesGcmCipher()
        k = new_session_key()
        env = cipher.seal(k, b"payload", b"\x00\x00\x00\x01")
        assert cipher.open(k, env, b"\x00\x00\x00\x01") == b"payload"
        with pytest.raises(InvalidTag):
            cipher.open(k, env, b"\x00\x00\x00\x02")
        with pytest.raises(InvalidTag):
            cipher.open(k, env[:-1] + bytes([env[-1] ^ 1]), b"\x00\x00\x00\x01")

    def test_key_pair_save_and_load(self, tmp_path, keypair):
        path = str(tmp_path / "keys" / "server_key.pem")
        keypair.save(path)
        assert oct(os.stat(path).st_mode & 0o777) == "0o600"
        assert ServerKeyPair.load(path).fingerprint() == keypair.fingerprint()
        assert keypair.fingerprint() == key_fingerprint(keypair.public_key)


class TestHandleAuthRequest:
    def test_wrong_public_key_fails_decryption(self, server_state):
        other = ServerKeyPair.generate()
        req = seal_image(0, image_bytes(server_state), other.public_key)
        response = handle_auth_request(req, server_state)
        assert (response.verdict, response.reason) == ("reject", "decrypt_fail")

    def test_altered_device_id_fails_decryption(self, server_state, keypair):
        req = seal_image(0, image_bytes(server_state), keypair.public_key)
        forged = AuthRequest(1, req.m1, req.m2)
        assert handle_auth_request(forged, server_state).reason == "decrypt_fail"

    def test_wrong_image_size_fails_decryption(self, server_state, keypair):
        req = seal_image(0, b"\x00" * 10, keypair.public_key)
        assert handle_auth_request(req, server_state).reason == "decrypt_fail"

    def test_fresh_request_reaches_classifier(self, server_state, keypair, trained_run):
        req = build_auth_request(trained_run.legit_devices[0], keypair.public_key, trained_run.image)
        response = handle_auth_request(req, server_state)
        assert response.reason in ("ok", "low_confidence", "identity_mismatch")
        assert (response.verdict == "accept") == (response.reason == "ok")
        assert 0.0 <= response.p_open <= 1.0

    def test_unenrolled_claim_is_never_accepted(self, server_state, keypair):
        state = with_policy(server_state, INSERT_AFTER_DECRYPT, tau=-1.0)
        req = seal_image(424242, image_bytes(state), keypair.public_key)
        assert handle_auth_request(req, state).reason == "identity_mismatch"

    def test_every_replay_is_rejected(self, server_state, keypair):
        state = with_policy(server_state, INSERT_AFTER_DECRYPT,
                            filter_=BloomFilter.for_capacity(100_000, 1e-6, seeds=(5, 6)))
        payload = image_bytes(state)
        for _ in range(1000):
            req = seal_image(0, payload, keypair.public_key)
            assert handle_auth_request(req, state).reason != "replay"
            again = handle_auth_request(req, state)
            assert (again.verdict, again.reason) == ("reject", "replay")
        assert state.filter.n_inserted == 1000

    def test_after_decrypt_blocks_replayed_rejections(self, server_state, keypair):
        state = with_policy(server_state, INSERT_AFTER_DECRYPT, tau=1.0)
        req = seal_image(0, image_bytes(state), keypair.public_key)
        assert handle_auth_request(req, state).reason == "low_confidence"
        assert handle_auth_request(req, state).reason == "replay"

    def test_after_accept_only_remembers_accepted_requests(self, server_state, keypair):
        state = with_policy(server_state, INSERT_AFTER_ACCEPT, tau=1.0)
        req = seal_image(0, image_bytes(state), keypair.public_key)
        assert handle_auth_request(req, state).reason == "low_confidence"
        assert handle_auth_request(req, state).reason == "low_confidence"
        assert state.filter.n_inserted == 0

        state = with_policy(server_state, INSERT_AFTER_ACCEPT, tau=-1.0)
        first = handle_auth_request(req, state)
        expected = "replay" if first.verdict == "accept" else first.reason
        assert handle_auth_request(req, state).reason == expected

    @pytest.mark.parametrize("policy", [INSERT_AFTER_DECRYPT, INSERT_AFTER_ACCEPT])
    def test_racing_replays_admit_one_request(self, server_state, keypair, policy):
        state = with_policy(server_state, policy, tau=-1.0)
        req = predicted_claim(state, keypair, image_bytes(state, seed=3))
        barrier = threading.Barrier(8, timeout=30)

        def submit(_):
            barrier.wait()
            return handle_auth_request(req, state)

        with ThreadPoolExecutor(max_workers=8) as pool:
            responses = list(pool.map(submit, range(8)))
        assert sum(r.verdict == "accept" for r in responses) == 1
        assert sorted(r.reason for r in responses) == ["ok"] + ["replay"] * 7
        assert state.filter.n_inserted == 1

    def test_unknown_policy(self, server_state):
        with pytest.raises(ValueError):
            with_policy(server_state, "sometimes")

    def test_process_frame_counts_verdicts(self, server_state, keypair):
        req = seal_image(0, image_bytes(server_state), keypair.public_key)
        process_frame(req.to_bytes(), server_state)
        process_frame(req.to_bytes(), server_state)
        stats = server_state.stats()
        assert stats["verdicts"]["replay"] == 1
        assert sum(stats["verdicts"].values()) == 2
        assert stats["image"] == [server_state.width, server_state.height]
        with pytest.raises(ProtocolError):
            process_frame(b"\x01", server_state)


class TestEnrollment:
    def test_registry(self):
        reg = DeviceRegistry()
        assert reg.register(10) == 0
        assert reg.register(3) == 1
        with pytest.raises(RegistryConflict):
            reg.register(10)
        assert reg.device_of(1) == 3
        assert reg.label_of(99) is None
        assert DeviceRegistry.from_dict(reg.to_dict()) == reg

    def test_enrollment_needs_five_images(self, trained_run):
        with pytest.raises(ValueError):
            enroll_fleet(trained_run.legit_devices[:1], 4, trained_run.image)

    def test_labels_follow_enrollment_order(self, trained_run, keypair):
        data, reg = enroll_fleet(trained_run.legit_devices[:2], 5, trained_run.image, public_key=keypair.public_key)
        assert data.labels.tolist() == [0] * 5 + [1] * 5
        assert reg.pk_fingerprint == keypair.fingerprint()
        assert data.input_shape == (3, trained_run.image.height, trained_run.image.width)


class TestProvisioning:
    @pytest.fixture
    def provision_path(self, tmp_path, trained_run, keypair):
        path = str(tmp_path / "device_0.json")
        cfg = trained_run.config
        write_provisioning(path, trained_run.legit_devices[0], cfg.fleet.legit[0], trained_run.seed,
                           cfg.fleet.lfsr_width, keypair.public_key, trained_run.image)
        return path

    def test_legit_device_is_the_same_silicon(self, provision_path, trained_run, keypair):
        original = trained_run.legit_devices[0]
        pd = load_provisioning(provision_path)
        assert pd.device_id == original.device_id
        assert pd.device.challenge == original.challenge
        assert np.array_equal(pd.device.puf.weights, original.puf.weights)
        assert key_fingerprint(pd.public_key) == keypair.fingerprint()
        assert (pd.image.width, pd.image.height) == (trained_run.image.width, trained_run.image.height)

    def test_impostor_keeps_identity_but_not_silicon(self, provision_path, trained_run):
        original = trained_run.legit_devices[0]
        pd = load_provisioning(provision_path, impostor=True)
        assert pd.device_id == original.device_id
        assert pd.device.challenge == original.challenge
        assert not np.array_equal(pd.device.puf.weights, original.puf.weights)

    def test_provision_info_action(self, provision_path, keypair):
        info = execute("provision_info", {"path": provision_path})
        assert info["status"] == "success"
        assert info["kind"] == "arbiter"
        assert info["pk_fingerprint"] == keypair.fingerprint()
        assert execute("provision_info", {})["status"] == "error"

    def test_bad_version(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(ProtocolError):
            load_provisioning(str(path))


class TestParseEndpoint:
    def test_host_and_port(self):
        assert parse_endpoint("127.0.0.1:9400") == ("127.0.0.1", 9400)

    @pytest.mark.parametrize("bad", ["9400", "host:", ":9400", "host:port"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


class TestLoopbackServer:
    def test_replay_over_one_connection(self, server_state, keypair, trained_run):
        async def scenario():
            server = await start_auth_server(server_state, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            try:
                frame = build_auth_request(trained_run.legit_devices[0], keypair.public_key, trained_run.image).frame()
                return await exchange("127.0.0.1", port, [frame, frame])
            finally:
                server.close()
                await server.wait_closed()

        first, second = asyncio.run(scenario())
        assert first.reason != "replay"
        assert (second.verdict, second.reason) == ("reject", "replay")

    def test_concurrent_devices_get_their_own_verdicts(self, server_state, keypair, trained_run):
        legit = trained_run.legit_devices
        requests = [build_auth_request(d, keypair.public_key, trained_run.image) for d in legit]
        requests += [build_auth_request(d, keypair.public_key, trained_run.image, claimed_id=legit[i].device_id)
                     for i, d in enumerate(trained_run.impostor_devices)]
        requests += [seal_image(d.device_id, image_bytes(server_state, seed=10 + i), keypair.public_key)
                     for i, d in enumerate(legit)]
        assert len(requests) == 10
        expected = [handle_auth_request(r, with_policy(server_state, INSERT_AFTER_DECRYPT)) for r in requests]

        async def scenario():
            server = await start_auth_server(server_state, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            try:
                return await asyncio.gather(*(exchange("127.0.0.1", port, [r.frame()]) for r in requests))
            finally:
                server.close()
                await server.wait_closed()

        responses = [session[0] for session in asyncio.run(scenario())]
        for got, want in zip(responses, expected):
            assert (got.verdict, got.reason) == (want.verdict, want.reason)
            assert got.p_open == pytest.approx(want.p_open, abs=1e-6)
        assert sum(server_state.stats()["verdicts"].values()) == 10
        assert server_state.filter.n_inserted == 10

    @pytest.mark.parametrize("frame", [
        encode_frame(b"\x09garbage"),
        struct.pack(">I", DEFAULT_MAX_FRAME + 1),
    ])
    def test_malformed_frame_closes_connection(self, server_state, frame):
        async def scenario():
            server = await start_auth_server(server_state, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            try:
                reader, writer = await asyncio.open_connection("127.0.0.1", port)
                writer.write(frame)
                await writer.drain()
                data = await asyncio.wait_for(reader.read(), timeout=10)
                writer.close()
                return data
            finally:
                server.close()
                await server.wait_closed()

        assert asyncio.run(scenario()) == b""

    def test_device_client_against_server(self, tmp_path, server_state, keypair, trained_run):
        path = str(tmp_path / "device_0.json")
        cfg = trained_run.config
        write_provisioning(path, trained_run.legit_devices[0], cfg.fleet.legit[0], trained_run.seed,
                           cfg.fleet.lfsr_width, keypair.public_key, trained_run.image)

        async def scenario():
            server = await start_auth_server(server_state, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            loop = asyncio.get_running_loop()
            try:
                return await loop.run_in_executor(None, run_device, path, f"127.0.0.1:{port}", True)
            finally:
                server.close()
                await server.wait_closed()

        result = asyncio.run(scenario())
        assert result["mode"] == "replay"
        assert result["request_bytes"] <= 4096
        assert len(result["responses"]) == 2
        assert result["responses"][1]["reason"] == "replay"


def test_wire_overhead_action():
    out = execute("wire_overhead", {"width": 16, "height": 16})
    assert out["status"] == "success"
    assert out["m1_bytes"] == 12 + 256 + 16
    assert execute("unknown", {})["status"] == "error"
