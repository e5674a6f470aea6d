import pytest

from tracetriage.bundle import (ActionEvent, FrameRecord, NetworkRecord, Persona, ResourceStore,
                                SessionContext, assemble_bundle, host_of, seal)
from tracetriage.simulator import make_script, run_scenario

EPOCH = 1_767_225_600.0


def net(seq, t_rel, url="https://example.com/", method="GET", status=200, body=None, ref=None, mime="text/html"):
    return NetworkRecord(seq=seq, started_at=EPOCH + t_rel, duration_ms=10.0, method=method, url=url,
                         host=host_of(url), status=status, request_body=body, response_body_ref=ref,
                         mime_type=mime)


def small_bundle(bundle_id="b-small", *, sealed=True):
    """Three requests, three frames, two actions; hand-built so every value is known."""
    store = ResourceStore()
    store.add("net-0000-response", "html", b"<html><form><input name=password></form></html>")
    store.add("net-0002-response", "script", b"console.log('hi')")
    for i in range(3):
        store.add(f"frame-{i:04d}", "image", b"\x89PNG" + bytes([i]))
    network = [
        net(0, 0.0, "https://login.example.top/", ref="net-0000-response"),
        net(1, 0.8, "https://login.example.top/submit", method="POST", body="user=randombob&pass=x"),
        net(2, 1.3, "https://cdn.example.net/app.js", ref="net-0002-response", mime="application/javascript"),
    ]
    frames = [FrameRecord(0, 0.0, "frame-0000"), FrameRecord(1, 0.5, "frame-0001"), FrameRecord(2, 1.0, "frame-0002")]
    actions = [ActionEvent(0.4, "type", {"target": "user", "text": "randombob"}, "typed username"),
               ActionEvent(0.7, "click", {"x": 10, "y": 20}, "clicked Sign in")]
    ctx = SessionContext("Verify", "Please verify", "it@corp.example", "https://login.example.top/", Persona())
    bundle = assemble_bundle(bundle_id, network, frames, actions, store, ctx, session_end=2.0)
    if sealed:
        seal(bundle)
    return bundle


@pytest.fixture
def bundle():
    return small_bundle()


@pytest.fixture(scope="session")
def harvester():
    return run_scenario(make_script("logoless_harvester", 3))


@pytest.fixture(scope="session")
def brand():
    return run_scenario(make_script("brand_impersonation", 11))
