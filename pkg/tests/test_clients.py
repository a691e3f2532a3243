import json

import httpx
import numpy as np
import pytest

from src.clients import (
    MAX_SNIPPETS,
    GenerationRequest,
    HashingSentenceEncoder,
    HttpSearchClient,
    HttpTextGenerator,
    MockSearchClient,
    MockTextGenerator,
    build_clients,
    search_key,
    source_of_url,
)
from src.config import ClientConfig
from src.errors import ConfigError, FatalClientError, RetryableClientError


def test_mock_generator_returns_the_first_samples():
    generator = MockTextGenerator({"p": ["one", {"text": "two", "score": -0.5}, "three"]})
    out = generator.generate(GenerationRequest("p", samples=2))
    assert [g.text for g in out] == ["one", "two"]
    assert out[0].score is None and out[1].score == -0.5
    assert generator.generate(GenerationRequest("unknown")) == []
    assert generator.calls == 2


def test_mock_generator_rejects_bad_entries():
    with pytest.raises(ConfigError):
        MockTextGenerator({"p": [42]})


@pytest.mark.parametrize("kwargs", [{"samples": 0}, {"temperature": 2.5}, {"max_sentences": 0}])
def test_generation_request_validation(kwargs):
    with pytest.raises(ValueError):
        GenerationRequest("p", **kwargs)


def test_mock_search_ignores_keyword_order_and_applies_restrict():
    search = MockSearchClient({
        "Kanye West | GOOD Music": [
            {"url": "https://en.wikipedia.org/wiki/GOOD_Music", "name": "GOOD Music", "snippet": "record label"},
            {"url": "https://blog.example.com/x", "description": "fan blog", "source": "other"},
        ],
    })
    assert search_key(["Kanye West", "GOOD Music"]) == "GOOD Music | Kanye West"

    everything = search.search(["Kanye West", "GOOD Music"])
    assert [s.description for s in everything] == ["GOOD Music record label", "fan blog"]
    assert everything[0].source == "wikipedia"

    restricted = search.search(["GOOD Music", "Kanye West"], restrict=["wikipedia", "news"])
    assert [s.url for s in restricted] == ["https://en.wikipedia.org/wiki/GOOD_Music"]
    assert search.search(["nobody"]) == []
    assert search.calls == 3


def test_mock_search_caps_results():
    items = [{"url": f"https://news.example.com/{i}", "description": f"item {i}", "source": "news"} for i in range(15)]
    search = MockSearchClient({"x": items})
    assert len(search.search(["x"])) == MAX_SNIPPETS


def test_mock_search_requires_keywords():
    with pytest.raises(ValueError):
        MockSearchClient({}).search([])


def test_source_of_url():
    assert source_of_url("https://en.wikipedia.org/wiki/Berlin") == "wikipedia"
    assert source_of_url("https://wikipedia.org.evil.com/x") == "other"


def test_mocks_load_the_micro_fixtures(micro_dir):
    generator = MockTextGenerator.from_file(micro_dir / "generations.json")
    prompt = "Kanye West\nJay-Z\nEminem\n"
    assert [g.text for g in generator.generate(GenerationRequest(prompt))][0] == "Kendrick Lamar"

    search = MockSearchClient.from_file(micro_dir / "search.json")
    snippets = search.search(["Kanye West", "GOOD Music"], restrict=["wikipedia", "news"])
    assert len(snippets) == 1


def test_mock_fixture_must_be_a_json_object(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        MockTextGenerator.from_file(path)
    with pytest.raises(FileNotFoundError):
        MockSearchClient.from_file(tmp_path / "absent.json")


# ----------------------------------------------------------------------
# HTTP clients against a mock transport
# ----------------------------------------------------------------------

def sequence_transport(responses, seen):
    """Replay `responses` (status, json) in order, recording each request."""
    queue = list(responses)

    def handler(request):
        seen.append(request)
        status, body = queue.pop(0)
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler)


BING_BODY = {
    "webPages": {"value": [{"url": "https://en.wikipedia.org/wiki/Roc_Nation", "name": "Roc Nation",
                            "snippet": "Jay-Z founded Roc Nation"}]},
    "news": {"value": [{"url": "https://news.example.com/a", "name": "Headline", "description": "Story"}]},
}


def test_http_search_retries_transient_failures():
    seen = []
    client = HttpSearchClient("https://search.test/v7", "key", backoff_s=0.0,
                              transport=sequence_transport([(503, {}), (429, {}), (200, BING_BODY)], seen))
    snippets = client.search(["Jay-Z", "Roc Nation"])
    assert len(seen) == 3
    assert seen[0].headers["Authorization"] == "Bearer key"
    assert seen[0].url.params["q"] == "Jay-Z Roc Nation"
    assert [(s.source, s.description) for s in snippets] == [
        ("wikipedia", "Roc Nation Jay-Z founded Roc Nation"),
        ("news", "Headline Story"),
    ]


def test_http_search_gives_up_after_max_attempts():
    seen = []
    client = HttpSearchClient("https://search.test/v7", max_attempts=2, backoff_s=0.0,
                              transport=sequence_transport([(500, {}), (502, {})], seen))
    with pytest.raises(RetryableClientError):
        client.search(["x"])
    assert len(seen) == 2


def test_http_client_does_not_retry_fatal_statuses():
    seen = []
    client = HttpSearchClient("https://search.test/v7", backoff_s=0.0,
                              transport=sequence_transport([(401, {"error": "denied"})], seen))
    with pytest.raises(FatalClientError):
        client.search(["x"])
    assert len(seen) == 1


def test_http_client_retries_transport_errors():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            raise httpx.ConnectError("connection reset", request=request)
        return httpx.Response(200, json={"webPages": {"value": []}})

    client = HttpSearchClient("https://search.test/v7", backoff_s=0.0, transport=httpx.MockTransport(handler))
    assert client.search(["x"]) == []
    assert len(calls) == 2


def test_http_generator_scores_by_mean_token_logprob():
    seen = []
    body = {"choices": [
        {"text": " Kendrick Lamar", "logprobs": {"token_logprobs": [-0.2, -0.4, None]}},
        {"text": "   ", "logprobs": None},
        {"text": "Drake"},
    ]}
    generator = HttpTextGenerator("https://lm.test/v1/completions", backoff_s=0.0,
                                  transport=sequence_transport([(200, body)], seen))
    out = generator.generate(GenerationRequest("Kanye West\n", samples=3, max_sentences=2))
    assert [g.text for g in out] == ["Kendrick Lamar", "Drake"]
    assert out[0].score == pytest.approx(-0.3)
    assert out[1].score is None

    payload = json.loads(seen[0].content)
    assert payload["n"] == 3 and payload["max_tokens"] == 64 and payload["prompt"] == "Kanye West\n"


def test_http_generator_does_not_resend_after_an_error_status():
    seen = []
    generator = HttpTextGenerator("https://lm.test/v1/completions", backoff_s=0.0,
                                  transport=sequence_transport([(503, {}), (200, {"choices": []})], seen))
    with pytest.raises(RetryableClientError):
        generator.generate(GenerationRequest("Kanye West\n", samples=1))
    assert len(seen) == 1


def test_http_generator_does_not_resend_after_a_read_timeout():
    calls = []

    def handler(request):
        calls.append(request)
        raise httpx.ReadTimeout("no answer", request=request)

    generator = HttpTextGenerator("https://lm.test/v1/completions", backoff_s=0.0,
                                  transport=httpx.MockTransport(handler))
    with pytest.raises(RetryableClientError):
        generator.generate(GenerationRequest("Kanye West\n", samples=1))
    assert len(calls) == 1


def test_http_generator_retries_when_the_connection_fails():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            raise httpx.ConnectError("connection refused", request=request)
        return httpx.Response(200, json={"choices": [{"text": "Drake"}]})

    generator = HttpTextGenerator("https://lm.test/v1/completions", backoff_s=0.0,
                                  transport=httpx.MockTransport(handler))
    assert [g.text for g in generator.generate(GenerationRequest("Kanye West\n", samples=1))] == ["Drake"]
    assert len(calls) == 2


# ----------------------------------------------------------------------
# Sentence encoder and client wiring
# ----------------------------------------------------------------------

def test_hashing_sentence_encoder():
    encoder = HashingSentenceEncoder()
    a = encoder.encode("Jay-Z signed with Roc Nation")
    assert a.shape == (256,)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    np.testing.assert_allclose(encoder.encode_many(["Jay-Z signed with Roc Nation"])[0], a)
    assert encoder.encode_many([]).shape == (0, 256)


def test_build_clients_from_mock_fixtures(micro_dir):
    config = ClientConfig(generator=f"mock:{micro_dir / 'generations.json'}",
                          search=f"mock:{micro_dir / 'search.json'}")
    clients = build_clients(config)
    assert isinstance(clients.generator, MockTextGenerator)
    assert isinstance(clients.search, MockSearchClient)
    assert isinstance(clients.encoder, HashingSentenceEncoder)


def test_build_clients_resolves_relative_mock_paths_against_base_dir(micro_dir):
    config = ClientConfig(generator="mock:generations.json", search="mock:search.json")
    clients = build_clients(config, base_dir=micro_dir)
    assert isinstance(clients.search, MockSearchClient)


def test_build_clients_rejects_unknown_backends(micro_dir):
    with pytest.raises(ConfigError):
        build_clients(ClientConfig(generator="carrier-pigeon"))
    with pytest.raises(ConfigError):
        build_clients(ClientConfig(generator=f"mock:{micro_dir / 'generations.json'}",
                                   search=f"mock:{micro_dir / 'search.json'}", encoder="bert"))


def test_http_clients_need_an_endpoint(monkeypatch):
    monkeypatch.delenv("ROWCOMP_LM_ENDPOINT", raising=False)
    with pytest.raises(ConfigError):
        build_clients(ClientConfig(generator="http"))


def test_http_clients_read_endpoints_from_the_environment(monkeypatch):
    monkeypatch.setenv("ROWCOMP_LM_ENDPOINT", "https://lm.test/v1/completions")
    monkeypatch.setenv("ROWCOMP_SEARCH_ENDPOINT", "https://search.test/v7")
    clients = build_clients(ClientConfig(generator="http", search="http"))
    assert isinstance(clients.generator, HttpTextGenerator)
    assert clients.search.endpoint == "https://search.test/v7"
