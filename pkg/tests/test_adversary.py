"""Tests for adversary scripts and the scripted link."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from talos.adversary import (
    NAMED_SCRIPTS,
    Action,
    Adversary,
    AdversaryScript,
    Direction,
    Hook,
    frame_kind,
    resolve_script,
)
from talos.exceptions import AbortReason, ConfigError
from talos.harness import Testbed
from talos.wire import Abort, AttestationDigest, VerificationResult, encode_frame

from .conftest import MOCK_OTHER_SESSION_ID, MOCK_SESSION_ID

DIGEST = AttestationDigest(MOCK_SESSION_ID, bytes(32)).to_frame()
VERDICT = VerificationResult(MOCK_SESSION_ID, True).to_frame()


def _adversary(*hooks: Hook) -> Adversary:
    return Adversary(AdversaryScript("test", hooks))


def test_script_from_dict() -> None:
    """Test a script document becomes typed hooks with defaults filled in."""
    script = AdversaryScript.from_dict(
        {
            "name": "custom",
            "seed": 7,
            "hooks": [
                {"action": "mutate", "message": "state-package", "offset": 3, "xor": 128},
                {"action": "inject", "payload": "AABB", "session": 1},
                {"action": "drop"},
            ],
        }
    )
    assert script.name == "custom"
    assert script.seed == 7
    assert script.hooks == (
        Hook(Action.MUTATE, "state-package", offset=3, xor=128),
        Hook(Action.INJECT, payload=b"\xaa\xbb", session=1),
        Hook(Action.DROP),
    )


@pytest.mark.parametrize(
    "data",
    [
        {},
        {"hooks": [{"action": "explode"}]},
        {"hooks": [{"action": "drop", "message": "telegram"}]},
        {"hooks": [{"action": "mutate", "xor": 0}]},
        {"hooks": [{"action": "mutate", "offset": -1}]},
        {"hooks": [{"action": "inject", "payload": "xyz"}]},
    ],
)
def test_script_errors(data: dict) -> None:
    """Test invalid documents raise ConfigError."""
    with pytest.raises(ConfigError):
        AdversaryScript.from_dict(data)


def test_resolve_script(tmp_path: Path) -> None:
    """Test names resolve to shipped scripts and paths load from disk."""
    assert resolve_script("drop-digest") is NAMED_SCRIPTS["drop-digest"]
    path = tmp_path / "script.json"
    path.write_text(json.dumps({"name": "from-file", "hooks": [{"action": "record"}]}))
    assert resolve_script(str(path)).name == "from-file"
    with pytest.raises(ConfigError):
        resolve_script(str(tmp_path / "missing.json"))
    path.write_text("{")
    with pytest.raises(ConfigError):
        AdversaryScript.load(path)


def test_frame_kind() -> None:
    """Test frames are named by their type byte."""
    assert frame_kind(DIGEST) == "ATTESTATION_DIGEST"
    assert frame_kind(encode_frame(0x42, b"")) == "0x42"
    assert frame_kind(b"TAL") == "short"


def test_hook_filters() -> None:
    """Test hooks match by message kind and run index."""
    hook = Hook(Action.DROP, "attestation-digest", session=1)
    assert not hook.matches(DIGEST, 0)
    assert hook.matches(DIGEST, 1)
    assert not hook.matches(VERDICT, 1)
    assert Hook(Action.DROP).matches(VERDICT, 5)


def test_actions() -> None:
    """Test each action's effect on the delivered frames."""
    assert _adversary(Hook(Action.DROP, "attestation-digest")).intercept(DIGEST) == []
    assert _adversary(Hook(Action.DROP, "attestation-digest")).intercept(VERDICT) == [VERDICT]
    assert _adversary(Hook(Action.DUPLICATE)).intercept(DIGEST) == [DIGEST, DIGEST]
    assert _adversary(Hook(Action.INJECT, payload=b"x")).intercept(DIGEST) == [DIGEST, b"x"]

    mutated = _adversary(Hook(Action.MUTATE, offset=16, xor=0x80)).intercept(DIGEST)[0]
    assert len(mutated) == len(DIGEST)
    assert mutated[11 + 16] == DIGEST[11 + 16] ^ 0x80
    assert mutated[:27] == DIGEST[:27]


def test_random_mutation_is_seeded() -> None:
    """Test offsetless mutations depend only on the seed."""
    script = AdversaryScript("seeded", (Hook(Action.MUTATE),), seed=3)
    first = [Adversary(script).intercept(DIGEST)[0] for _ in range(2)]
    assert first[0] == first[1]
    assert first[0] != DIGEST


def test_record_and_replay() -> None:
    """Test recordings replay in later runs, optionally retargeted."""
    adversary = _adversary(
        Hook(Action.RECORD, "attestation-digest", session=0),
        Hook(Action.REPLAY, "attestation-digest", session=1, retarget=True),
    )
    assert adversary.intercept(DIGEST) == [DIGEST]
    assert adversary.recorded == [DIGEST]
    assert adversary.fired == []
    adversary.next_run()
    live = AttestationDigest(MOCK_OTHER_SESSION_ID, b"\x01" * 32).to_frame()
    [replayed] = adversary.intercept(live)
    assert replayed[11:27] == MOCK_OTHER_SESSION_ID
    assert replayed[27:] == bytes(32)
    assert adversary.fired == [(1, Action.REPLAY, "ATTESTATION_DIGEST")]


def test_replay_without_recording() -> None:
    """Test a replay with nothing recorded passes the frame through."""
    adversary = _adversary(Hook(Action.REPLAY, index=2))
    assert adversary.intercept(DIGEST) == [DIGEST]
    assert adversary.fired == []


def test_link_transcript(testbed: Testbed) -> None:
    """Test an honest link moves the six protocol messages in order."""
    result = testbed.migrate(Adversary(NAMED_SCRIPTS["honest"]))
    assert result.confirmed
    assert result.transcript == [
        (Direction.TO_SOURCE, "CHALLENGE"),
        (Direction.TO_TARGET, "CHANNEL_KEY"),
        (Direction.TO_SOURCE, "CHANNEL_KEY"),
        (Direction.TO_TARGET, "STATE_PACKAGE"),
        (Direction.TO_SOURCE, "ATTESTATION_DIGEST"),
        (Direction.TO_TARGET, "VERIFICATION_RESULT"),
    ]


def test_link_drops_garbage(testbed: Testbed) -> None:
    """Test undecodable injected frames are discarded by the link."""
    adversary = _adversary(Hook(Action.INJECT, "channel-key", payload=b"garbage"))
    result = testbed.migrate(adversary)
    assert result.confirmed
    assert (Direction.TO_TARGET, "short") in result.transcript


def test_forged_abort_in_place_of_digest(testbed: Testbed) -> None:
    """Test an abort forged for the live session never leaves two nodes Active."""
    source, target = testbed.nodes
    forged = Abort(MOCK_SESSION_ID, AbortReason.STALLED).to_frame()
    adversary = Adversary(
        AdversaryScript(
            "forge-abort", (Hook(Action.REPLAY, "attestation-digest", retarget=True),)
        ),
        recorded=[forged],
    )
    result = testbed.migrate(adversary)
    assert not result.confirmed
    assert adversary.fired == [(0, Action.REPLAY, "ATTESTATION_DIGEST")]
    assert (Direction.TO_SOURCE, "VERIFICATION_RESULT") in result.transcript
    assert testbed.violations == []
    assert testbed.holder() is source
    assert not target.registry.is_active(testbed.measurement)


def test_injected_unknown_type(testbed: Testbed) -> None:
    """Test frames of unknown type do not disturb a migration."""
    adversary = _adversary(Hook(Action.INJECT, "challenge", payload=encode_frame(0x42, b"x")))
    result = testbed.migrate(adversary)
    assert result.confirmed
    assert (Direction.TO_SOURCE, "0x42") in result.transcript
