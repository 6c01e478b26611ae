"""HTTP client for the controller API.

Maps the API's ``{"error": <class>, "detail": ...}`` failure documents back
onto the typed exceptions, so CLI and tests see the same errors as in-process
callers.
"""

from __future__ import annotations

import json

import requests

from .errors import ApiConnectionError, EaasError, ERRORS_BY_NAME
from .httpapi import SESSION_HEADER
from .protocol import (
    ContainerState,
    MetricsSample,
    ServiceRequest,
    ServiceResponse,
    doc_to_message,
    message_to_doc,
)

_CONNECT_TIMEOUT_S = 10.0
# launches on calibrated mock delays take close to a minute
_READ_TIMEOUT_S = 300.0


class ApiClient:
    def __init__(self, base_url: str, token: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self._http = requests.Session()

    def close(self) -> None:
        self._http.close()

    # -- plumbing -----------------------------------------------------------------

    def _call(self, method: str, path: str, doc: dict | None = None,
              params: dict | None = None) -> requests.Response:
        headers = {}
        if self.token:
            headers[SESSION_HEADER] = self.token
        try:
            response = self._http.request(
                method,
                self.base_url + path,
                json=doc,
                params=params,
                headers=headers,
                timeout=(_CONNECT_TIMEOUT_S, _READ_TIMEOUT_S),
            )
        except requests.RequestException as exc:
            raise ApiConnectionError(f"cannot reach {self.base_url}: {exc}") from exc
        if response.status_code >= 400:
            raise self._as_error(response)
        return response

    @staticmethod
    def _as_error(response: requests.Response) -> EaasError:
        try:
            doc = response.json()
        except ValueError:
            doc = {}
        name = doc.get("error", "")
        detail = doc.get("detail", f"HTTP {response.status_code}")
        cls = ERRORS_BY_NAME.get(name, EaasError)
        return cls(detail)

    # -- endpoints ------------------------------------------------------------------

    def login(self, username: str, password: str) -> str:
        doc = self._call("POST", "/login", {"username": username, "password": password}).json()
        self.token = doc["token"]
        return self.token

    def create_user(self, username: str, password: str, role: str) -> dict:
        return self._call(
            "POST", "/users", {"username": username, "password": password, "role": role}
        ).json()

    def nodes(self) -> list[dict]:
        return self._call("GET", "/nodes").json()["nodes"]

    def containers(self, state: ContainerState | str | None = None,
                   owner: str | None = None) -> list[dict]:
        params = {}
        if state is not None:
            params["state"] = state.value if isinstance(state, ContainerState) else state
        if owner is not None:
            params["owner"] = owner
        return self._call("GET", "/containers", params=params).json()["containers"]

    def request(self, req: ServiceRequest) -> ServiceResponse:
        doc = self._call("POST", "/requests", message_to_doc(req)).json()
        msg = doc_to_message(doc)
        if not isinstance(msg, ServiceResponse):
            raise EaasError(f"unexpected API reply: {json.dumps(doc)[:200]}")
        return msg

    def download_key(self, key_handle: str) -> bytes:
        return self._call("GET", f"/keys/{key_handle}").content

    def metrics(self, node_id: str) -> MetricsSample:
        doc = self._call("GET", "/metrics", params={"nodeId": node_id}).json()
        msg = doc_to_message(doc)
        if not isinstance(msg, MetricsSample):
            raise EaasError("unexpected metrics reply")
        return msg

    def active_users(self) -> list[dict]:
        return self._call("GET", "/users/active").json()["users"]

    def set_monitor_interval(self, seconds: float) -> float:
        return self._call("PUT", "/monitor/interval", {"seconds": seconds}).json()["seconds"]
