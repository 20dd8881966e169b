"""Python bindings for the fedchat core: tiny LM, metrics, ingest, retrieval and the chat service."""

import json

from ._core import (
    FedchatError,
    Model,
    bleu,
    detokenize,
    ingest,
    load_blocks,
    nn_search,
    parse_blocks,
    quantize_roundtrip,
    rouge_l,
    rouge_n,
    tokenize,
)
from ._core import ChatService as _ChatService


class ChatService:
    """In-process chat service. Replies are (http_status, dict) like the HTTP API."""

    def __init__(self, **config):
        self._svc = _ChatService(json.dumps(config))

    def load(self):
        self._svc.load()
        return self

    @property
    def ready(self):
        return self._svc.ready()

    def ask(self, question, k=None, context=None):
        body = {"question": question}
        if k is not None:
            body["k"] = k
        if context is not None:
            body["context"] = context
        status, reply = self._svc.ask(json.dumps(body))
        return status, json.loads(reply)

    def ingest(self, documents):
        status, reply = self._svc.ingest(json.dumps({"documents": documents}))
        return status, json.loads(reply)

    def health(self):
        status, reply = self._svc.health()
        return status, json.loads(reply)


__all__ = [
    "ChatService",
    "FedchatError",
    "Model",
    "bleu",
    "detokenize",
    "ingest",
    "load_blocks",
    "nn_search",
    "parse_blocks",
    "quantize_roundtrip",
    "rouge_l",
    "rouge_n",
    "tokenize",
]
