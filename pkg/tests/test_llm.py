import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kar.corpus import DocStructure
from kar.llm import (TEMPLATE_IDS, GenRequest, LlmError, MockLLM, OpenAIChat, PromptError, capitalized_spans,
                     fit_prompt, generate, load_template, prompt_and_generate, render)

from conftest import GOLDEN
from stub_server import StubServer

STRUCT = DocStructure.from_mapping({"product": ["title", "brand"], "brand": ["name"]}).render()
QUERY = "Which tent from Alpine Gear packs smallest?"

FIXTURE_BINDINGS = {
    "hyde": {"doc_struct": STRUCT, "query": QUERY},
    "rar": {"doc_struct": STRUCT, "query": QUERY, "prf_docs": [
        "product: title: Trail 2 tent. brand: Alpine Gear.",
        "product: title: Dome 4. brand: Campwell.",
        "brand: name: Alpine Gear.",
    ]},
    "agr_extract": {"query": QUERY},
    "agr_analyze": {"query": QUERY, "extracted_keywords": "tent, Alpine Gear, packed size"},
    "agr_generate1": {"doc_struct": STRUCT, "query": QUERY,
                      "query_analysis": "The user wants a compact tent made by Alpine Gear."},
    "agr_generate2": {"doc_struct": STRUCT, "query": QUERY,
                      "retrieved_docs": [f"retrieved document {i}." for i in range(1, 10)]},
    "agr_refine": {"query": QUERY, "generated_docs": ["candidate A.", "candidate B.", "candidate C."]},
    "kar_parse": {"doc_struct": STRUCT, "query": QUERY},
    "kar_generate": {"doc_struct": STRUCT, "query": QUERY, "document_triples": [
        "brand: name: Alpine Gear. --[brand of product]--> product: title: Trail 2 tent. brand: Alpine Gear.",
        "brand: name: Alpine Gear. --[brand of product → also bought (inverse)]--> "
        "product: title: Dome 4. brand: Campwell.",
    ]},
}


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_rendered_prompt_matches_golden(template_id):
    expected = (GOLDEN / "prompts" / f"{template_id}.txt").read_text(encoding="utf-8")
    assert render(template_id, FIXTURE_BINDINGS[template_id]) == expected


def test_hyde_shape():
    text = render("hyde", FIXTURE_BINDINGS["hyde"])
    assert text.startswith("Given the document structures:") and text.endswith("Document:")


def test_parse_instruction_present():
    assert "identify named entities in the following user query" in render("kar_parse", FIXTURE_BINDINGS["kar_parse"])


def test_missing_binding_named():
    with pytest.raises(PromptError, match="query"):
        render("hyde", {"doc_struct": STRUCT})


def test_unknown_template():
    with pytest.raises(PromptError):
        load_template("nope")


def test_single_pass_substitution():
    out = render("agr_extract", {"query": "what is {query}?"})
    assert "Query: what is {query}?" in out


@pytest.mark.parametrize("dataset", ["amazon", "mag", "prime"])
@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_every_template_renders_for_bundled_structures(dataset, template_id):
    tpl = load_template(template_id)
    bindings = {p: ["x", "y"] for p in tpl.placeholders}
    bindings.update(doc_struct=DocStructure.builtin(dataset).render(), query="q")
    out = render(tpl, {k: v for k, v in bindings.items() if k in tpl.placeholders})
    assert "{" not in out.replace(bindings.get("doc_struct", ""), "").replace("{document type: {document attributes}}", "")


# -- truncation ---------------------------------------------------------------------

def _suffix(template_id, query):
    return f"Query: {query}\n\n" + load_template(template_id).body.rsplit("\n", 1)[1]


def test_truncation_keeps_suffix_and_cuts_tails():
    docs = ["A" * 400, "B" * 200, "C" * 100]
    bindings = {"doc_struct": STRUCT, "query": QUERY, "prf_docs": docs}
    full = render("rar", bindings)
    prompt, fitted = fit_prompt("rar", bindings, len(full) - 350)
    assert len(prompt) <= len(full) - 350
    assert prompt.endswith(_suffix("rar", QUERY))
    assert STRUCT in prompt
    cut = [len(o) - len(f) for o, f in zip(docs, fitted["prf_docs"])]
    assert cut == [200, 100, 50]
    assert all(o.startswith(f) for o, f in zip(docs, fitted["prf_docs"]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(st.characters(codec="ascii", exclude_characters="{}"), max_size=300), min_size=1, max_size=8),
       st.integers(0, 2000))
def test_truncation_property(triples, slack):
    bindings = {"doc_struct": STRUCT, "query": QUERY, "document_triples": triples}
    skeleton = len(render("kar_generate", {**bindings, "document_triples": [""] * len(triples)}))
    budget = skeleton + slack
    prompt, fitted = fit_prompt("kar_generate", bindings, budget)
    assert len(prompt) <= budget
    assert prompt.endswith(_suffix("kar_generate", QUERY))
    assert all(t.startswith(f) for t, f in zip(triples, fitted["document_triples"]))


def test_truncation_impossible_budget():
    with pytest.raises(PromptError):
        fit_prompt("hyde", FIXTURE_BINDINGS["hyde"], 20)


# -- generation contract -----------------------------------------------------------

def test_gen_request_validation():
    with pytest.raises(ValueError):
        GenRequest("p", n_samples=0)


def test_generate_rejects_empty_and_oversized_prompts():
    llm = MockLLM(context_window=50)
    with pytest.raises(ValueError):
        generate(llm, GenRequest(""))
    with pytest.raises(ValueError, match="context window"):
        generate(llm, GenRequest("x" * 51))


def test_generate_checks_sample_count():
    class Short(MockLLM):
        def complete(self, req):
            return ["only one"]

    with pytest.raises(LlmError):
        generate(Short(), GenRequest("p", n_samples=3))


def test_prompt_and_generate_fits_the_window():
    llm = MockLLM(context_window=900)
    bindings = {**FIXTURE_BINDINGS["rar"], "prf_docs": ["tent " * 200] * 3}
    prompt, out = prompt_and_generate(llm, "rar", bindings, 2)
    assert len(prompt) <= 900 and len(out) == 2


# -- mock backend -------------------------------------------------------------------

def test_mock_is_deterministic_and_counts_samples():
    b = FIXTURE_BINDINGS["rar"]
    req = GenRequest(render("rar", b), n_samples=3, template_id="rar", bindings=b)
    a, c = MockLLM().complete(req), MockLLM().complete(req)
    assert a == c and len(a) == 3


def test_mock_parse_emits_one_block_per_span():
    b = {"doc_struct": STRUCT, "query": "papers by Alice Smith on Graph Theory"}
    (out,) = MockLLM().complete(GenRequest(render("kar_parse", b), template_id="kar_parse", bindings=b))
    assert out.splitlines() == ["{entity: {name: Alice Smith}}", "{entity: {name: Graph Theory}}"]


def test_capitalized_spans():
    assert capitalized_spans("find tents by Alpine Gear and Alpine Gear") == ["Alpine Gear"]
    assert capitalized_spans("nothing here") == []
    assert capitalized_spans("Find a paper") == []


def test_mock_picks_best_overlapping_units():
    b = {"query": "alpine tent", "doc_struct": STRUCT,
         "prf_docs": ["Boots are waterproof. The alpine tent weighs little.", "A tent for two."]}
    (out,) = MockLLM().complete(GenRequest(render("rar", b), template_id="rar", bindings=b))
    assert out == "The alpine tent weighs little. A tent for two."


def test_mock_writes_triple_targets_only():
    triple = "brand: name: Alpine Gear. --[brand of product]--> product: title: Trail 2 tent."
    b = {"query": "Alpine Gear tent", "doc_struct": STRUCT, "document_triples": [triple]}
    (out,) = MockLLM().complete(GenRequest(render("kar_generate", b), template_id="kar_generate", bindings=b))
    assert out == "product: title: Trail 2 tent."


def test_mock_call_log():
    llm = MockLLM()
    generate(llm, GenRequest("hello", n_samples=2, template_id="hyde", bindings={"query": "hello"}))
    assert llm.calls == 1 and llm.log == ["hyde"]
    llm.reset()
    assert llm.calls == 0


# -- remote backend -----------------------------------------------------------------

def _chat_body(req):
    return {"choices": [{"index": i, "message": {"content": f"answer {i}"}} for i in range(req["n"])][::-1]}


def test_remote_chat_against_stub():
    with StubServer([(200, _chat_body)]) as srv:
        out = generate(OpenAIChat(srv.url, "stub-chat"), GenRequest("hi", n_samples=3, max_tokens=64))
    assert out == ["answer 0", "answer 1", "answer 2"]
    req = srv.requests[0]
    assert req["n"] == 3 and req["temperature"] == 1.0 and req["max_tokens"] == 64
    assert req["messages"] == [{"role": "user", "content": "hi"}]


def test_remote_chat_retries_server_errors():
    with StubServer([(500, {}), (502, {}), (200, _chat_body)]) as srv:
        out = generate(OpenAIChat(srv.url, "m", backoff=0.0), GenRequest("hi"))
    assert out == ["answer 0"] and len(srv.requests) == 3


def test_remote_chat_short_choice_list():
    with StubServer([(200, {"choices": [{"index": 0, "message": {"content": "x"}}]})]) as srv:
        with pytest.raises(LlmError):
            generate(OpenAIChat(srv.url, "m"), GenRequest("hi", n_samples=2))


def test_remote_chat_bad_shape():
    with StubServer([(200, {"nothing": 1})]) as srv:
        with pytest.raises(LlmError):
            generate(OpenAIChat(srv.url, "m"), GenRequest("hi"))
