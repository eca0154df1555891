"""Landmark-presence verifier clients.

The pipeline asks a verifier whether the landmark named by an instruction is
present in an image. Production setups point VERIFIER_URL / VERIFIER_KEY at an
external endpoint; tests and synthetic builds use the deterministic keyword
stub, which inspects the scene spec embedded in a synthetic image_ref.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Protocol

from .synthetic import PALETTE, SCENE_PREFIX, SceneSpec


@dataclass
class VerifierVerdict:
    present: bool
    rationale: str = ""


class VerifierTransportError(RuntimeError):
    """Transport kept failing after the backoff budget was spent."""


class LandmarkVerifier(Protocol):
    def assess(self, image_ref: str, instruction: str) -> VerifierVerdict: ...


class KeywordStubVerifier:
    """Deterministic stub: a landmark is present iff a color word from the
    instruction names a box in the synthetic scene."""

    def assess(self, image_ref: str, instruction: str) -> VerifierVerdict:
        words = set(instruction.lower().split())
        mentioned = words & set(PALETTE)
        if not image_ref.startswith(SCENE_PREFIX):
            return VerifierVerdict(False, "non-synthetic ref; stub assumes absent")
        scene_colors = {color for (color, *_rest) in SceneSpec.parse(image_ref).boxes}
        hits = sorted(mentioned & scene_colors)
        if hits:
            return VerifierVerdict(True, f"landmark color(s) {hits} present in scene")
        return VerifierVerdict(False, f"none of {sorted(mentioned)} present in scene")


class ScriptedVerifier:
    """Replays a fixed verdict sequence; used to exercise retry paths."""

    def __init__(self, verdicts):
        self.verdicts = list(verdicts)
        self.calls = 0

    def assess(self, image_ref: str, instruction: str) -> VerifierVerdict:
        verdict = self.verdicts[min(self.calls, len(self.verdicts) - 1)]
        self.calls += 1
        if isinstance(verdict, Exception):
            raise verdict
        return verdict


class HttpVerifier:
    """POSTs {image_ref, instruction} and expects {"present": bool, "rationale": str}.

    Transport failures are retried with exponential backoff; exhausting the
    budget raises VerifierTransportError.
    """

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff: float = 0.25,
        timeout: float = 10.0,
        session=None,
    ):
        self.url = url or os.environ.get("VERIFIER_URL")
        if not self.url:
            raise ValueError("no verifier URL: pass url= or set VERIFIER_URL")
        self.api_key = api_key or os.environ.get("VERIFIER_KEY")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def assess(self, image_ref: str, instruction: str) -> VerifierVerdict:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"image_ref": image_ref, "instruction": instruction}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = self.session.post(
                    self.url, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                doc = resp.json()
                return VerifierVerdict(bool(doc["present"]), str(doc.get("rationale", "")))
            except Exception as err:  # noqa: BLE001 - transport layer is opaque here
                last_error = err
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff * (2**attempt))
        raise VerifierTransportError(
            f"verifier at {self.url} failed after {self.max_attempts} attempts: {last_error}"
        )
