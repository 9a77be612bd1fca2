import asyncio
import csv
import json

import httpx
import numpy as np
import pytest

from task_superposition.errors import BoundaryError, ContractError, RequestRejected, SpecError, TransportError
from task_superposition.model.mock import PrefixTableModel
from task_superposition.model.probe import answer_probability
from task_superposition.remote import create_app
from task_superposition.remote.schema import CompletionRequest, CompletionResponse, TokenLogprobs
from task_superposition.remote.scoring import Scorer, run_mixture_protocol, score_answer, write_protocol_result
from task_superposition.remote.settings import (
    SETTINGS, TaskSetting, continuation, prompt_alphabet, render_query, setting_by_name,
)
from task_superposition.remote.spellers import english, french, spanish
from task_superposition.remote.transport import HttpTransport, MockTransport
from task_superposition.util import derive_rng, draw_base_seed


@pytest.mark.parametrize('speller, n, words', [
    (english, 0, 'zero'),
    (english, 21, 'twenty-one'),
    (english, 100, 'one hundred'),
    (english, 115, 'one hundred fifteen'),
    (english, 999, 'nine hundred ninety-nine'),
    (french, 17, 'dix-sept'),
    (french, 21, 'vingt et un'),
    (french, 71, 'soixante et onze'),
    (french, 77, 'soixante-dix-sept'),
    (french, 80, 'quatre-vingts'),
    (french, 81, 'quatre-vingt-un'),
    (french, 91, 'quatre-vingt-onze'),
    (french, 100, 'cent'),
    (french, 200, 'deux cents'),
    (french, 201, 'deux cent un'),
    (spanish, 0, 'cero'),
    (spanish, 21, 'veintiuno'),
    (spanish, 35, 'treinta y cinco'),
    (spanish, 100, 'cien'),
    (spanish, 101, 'ciento uno'),
    (spanish, 500, 'quinientos'),
])
def test_number_words(speller, n, words):
    assert speller(n) == words


@pytest.mark.parametrize('n', [-1, 1000])
def test_number_words_range(n):
    for speller in (english, french, spanish):
        with pytest.raises(ContractError):
            speller(n)


@pytest.mark.parametrize('name', sorted(SETTINGS))
def test_setting_prompts(name):
    setting = setting_by_name(name)
    prompt = setting.make_prompt(3, derive_rng(1))
    assert sorted(prompt.labels) == sorted(list(setting.task_names) * 3)
    assert prompt.text.endswith(render_query(prompt.query))
    lines = prompt.text.split('\n')
    assert len(lines) == 3 * len(setting.task_names) + 1
    assert all(not line.startswith(prompt.query + ' ->') for line in lines[:-1])
    assert len(set(prompt.answers)) == len(prompt.answers)

    alphabet = set(prompt_alphabet())
    assert set(prompt.text) <= alphabet
    assert all(set(continuation(a)) <= alphabet for a in prompt.answers)


def test_setting_errors():
    with pytest.raises(SpecError):
        setting_by_name('poetry')
    with pytest.raises(ContractError):
        SETTINGS['addition'].make_prompt(0, derive_rng(0))


def chain_model() -> PrefixTableModel:
    model = PrefixTableModel(['x', '=', 'a', 'b', 'c'])
    model.set('x=', {'a': 0.5, 'b': 0.5})
    model.set('x=a', {'b': 0.4, 'c': 0.6})
    return model


@pytest.mark.parametrize('strategy', ['echo', 'sequential'])
async def test_chain_product_over_the_wire(strategy):
    transport = MockTransport(chain_model())
    probability = await score_answer(transport, 'x=', 'ab', strategy=strategy)
    assert probability == pytest.approx(0.2, abs=1e-12)


async def test_strategies_agree_with_the_model(rng):
    vocab = prompt_alphabet()
    prompt = SETTINGS['addition'].make_prompt(2, rng)
    answers = {continuation(a): p for a, p in zip(prompt.answers, [0.4, 0.3, 0.2, 0.05])}
    model = PrefixTableModel.from_answers(vocab, prompt.text, answers, filler='\n')

    echo = Scorer(MockTransport(model))
    sequential = Scorer(MockTransport(model), strategy='sequential')
    for answer, p in answers.items():
        expected = answer_probability(model, model.encode(prompt.text), model.encode(answer))
        assert expected == pytest.approx(p, abs=1e-12)
        assert await echo.score_answer(prompt.text, answer) == pytest.approx(expected, abs=1e-12)
        assert await sequential.score_answer(prompt.text, answer) == pytest.approx(expected, abs=1e-12)
    assert echo.strategy == 'echo'


async def test_falls_back_to_sequential_scoring():
    transport = MockTransport(chain_model(), supports_echo=False)
    scorer = Scorer(transport)
    assert await scorer.score_answer('x=', 'ab') == pytest.approx(0.2, abs=1e-12)
    assert scorer.strategy == 'sequential'


async def test_scoring_contract():
    scorer = Scorer(MockTransport(chain_model()))
    with pytest.raises(ContractError):
        await scorer.score_answer('x=', '')
    with pytest.raises(ContractError):
        await scorer.score_answer('', 'a')


async def test_answers_outside_the_top_alternatives_score_zero():
    scorer = Scorer(MockTransport(chain_model()), strategy='sequential')
    assert await scorer.score_answer('x=', 'c') == 0.0


async def test_tokens_straddling_the_boundary():
    model = PrefixTableModel(['x', '=', 'ab', 'a', 'b'])
    model.set('x=', {'ab': 1.0})
    model.set('x=a', {'b': 1.0})

    with pytest.raises(BoundaryError) as info:
        await Scorer(MockTransport(model), strategy='echo').score_answer('x=a', 'b')
    assert info.value.split == ('a', 'b')

    with pytest.raises(BoundaryError) as info:
        await Scorer(MockTransport(model), strategy='sequential').score_answer('x=', 'a')
    assert info.value.split == ('a', 'b')


async def test_mock_transport_bounds_requests_in_flight():
    transport = MockTransport(chain_model(), max_in_flight=2, latency=0.01)
    request = CompletionRequest(model='', prompt='x=', max_tokens=1, logprobs=2)
    responses = await asyncio.gather(*(transport.complete(request) for _ in range(10)))
    assert transport.calls == 10
    assert transport.peak_in_flight == 2
    assert all(r.choices[0].text == 'a' for r in responses)


@pytest.fixture
def server_transport():
    app = create_app({'mock': chain_model()})
    return HttpTransport('http://test/v1', transport=httpx.ASGITransport(app=app))


async def test_scoring_through_the_mock_server(server_transport):
    async with server_transport as transport:
        scorer = Scorer(transport, model='mock')
        assert await scorer.score_answer('x=', 'ab') == pytest.approx(0.2, abs=1e-12)
        assert scorer.strategy == 'echo'


async def test_server_without_echo():
    app = create_app({'mock': chain_model()}, supports_echo=False)
    async with HttpTransport('http://test/v1', transport=httpx.ASGITransport(app=app)) as transport:
        scorer = Scorer(transport, model='mock')
        assert await scorer.score_answer('x=', 'ab') == pytest.approx(0.2, abs=1e-12)
        assert scorer.strategy == 'sequential'


async def test_server_rejections(server_transport):
    async with server_transport as transport:
        with pytest.raises(RequestRejected) as info:
            await transport.complete(CompletionRequest(model='other', prompt='x=', max_tokens=1))
        assert info.value.status == 404

        with pytest.raises(RequestRejected) as info:
            await transport.complete(CompletionRequest(model='mock', prompt='x=', max_tokens=1, temperature=1.0))
        assert info.value.status == 400

        # an unknown model is not an echo problem, the scorer must not fall back
        with pytest.raises(RequestRejected):
            await Scorer(transport, model='other').score_answer('x=', 'ab')


async def test_server_validates_requests():
    app = create_app({'mock': chain_model()})
    async with httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url='http://test') as client:
        response = await client.post('/v1/completions', json={'model': 'mock', 'prompt': 'x=', 'stream': True})
        assert response.status_code == 400
        assert response.json()['title'] == '400: ValidationError'

        response = await client.post('/v1/completions', json={'model': 'mock', 'prompt': 'x=', 'max_tokens': 1})
        assert response.status_code == 200
        assert response.json()['choices'][0]['text'] == 'a'


def completion_json(text: str = 'a') -> dict:
    return CompletionResponse(choices=[{'text': text, 'logprobs': TokenLogprobs(
        tokens=[text], token_logprobs=[-0.5], top_logprobs=[{text: -0.5}], text_offset=[2],
    )}]).model_dump()


async def test_retries_with_backoff():
    statuses = [503, 429, 200]
    sleeps: list[float] = []

    async def sleep(delay: float) -> None:
        sleeps.append(delay)

    def handler(request: httpx.Request) -> httpx.Response:
        status = statuses.pop(0)
        return httpx.Response(status, json=completion_json() if status == 200 else {'error': 'busy'})

    transport = HttpTransport('http://test/v1', transport=httpx.MockTransport(handler), sleep=sleep, base_delay=0.5)
    response = await transport.complete(CompletionRequest(model='m', prompt='x=', max_tokens=1, logprobs=1))
    await transport.aclose()

    assert response.choices[0].text == 'a'
    assert len(sleeps) == 2
    assert 0.5 <= sleeps[0] < 1.0
    assert 1.0 <= sleeps[1] < 2.0


async def test_gives_up_after_the_last_attempt():
    sleeps: list[float] = []

    async def sleep(delay: float) -> None:
        sleeps.append(delay)

    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError('refused', request=request)

    transport = HttpTransport('http://test/v1', transport=httpx.MockTransport(handler), sleep=sleep, attempts=3)
    with pytest.raises(TransportError) as info:
        await transport.complete(CompletionRequest(model='m', prompt='x='))
    await transport.aclose()
    assert not isinstance(info.value, RequestRejected)
    assert len(sleeps) == 2


async def test_client_errors_are_not_retried():
    sleeps: list[float] = []

    async def sleep(delay: float) -> None:
        sleeps.append(delay)

    transport = HttpTransport(
        'http://test/v1', transport=httpx.MockTransport(lambda request: httpx.Response(401, text='no key')), sleep=sleep,
    )
    with pytest.raises(RequestRejected) as info:
        await transport.complete(CompletionRequest(model='m', prompt='x='))
    await transport.aclose()
    assert info.value.status == 401
    assert sleeps == []


async def test_malformed_responses():
    transport = HttpTransport('http://test/v1', transport=httpx.MockTransport(lambda request: httpx.Response(200, json={'choices': []})))
    with pytest.raises(TransportError):
        await transport.complete(CompletionRequest(model='m', prompt='x='))
    await transport.aclose()


async def test_http_transport_bounds_requests_in_flight():
    in_flight, peak = 0, 0

    async def handler(request: httpx.Request) -> httpx.Response:
        nonlocal in_flight, peak
        in_flight += 1
        peak = max(peak, in_flight)
        await asyncio.sleep(0.01)
        in_flight -= 1
        return httpx.Response(200, json=completion_json())

    async with HttpTransport('http://test/v1', max_in_flight=3, transport=httpx.MockTransport(handler)) as transport:
        await asyncio.gather(*(transport.complete(CompletionRequest(model='m', prompt='x=')) for _ in range(12)))
    assert peak == 3


def protocol_model(setting: TaskSetting, n_prompts: int, seed: int, probabilities: list[float]) -> PrefixTableModel:
    """a prefix table knowing the answers of exactly the prompts the protocol will draw"""
    model = PrefixTableModel(prompt_alphabet())
    base = draw_base_seed(np.random.default_rng(seed))
    for i in range(n_prompts):
        prompt = setting.make_prompt(2, derive_rng(base, i))
        answers = {continuation(a): p for a, p in zip(prompt.answers, probabilities)}
        model.add_answers(prompt.text, answers, filler='\n')
    return model


async def test_protocol_measures_every_prompt(tmp_path):
    setting = SETTINGS['capitals']
    model = protocol_model(setting, 4, seed=3, probabilities=[0.6, 0.1, 0.2])
    transport = MockTransport(model, max_in_flight=2)
    result = await run_mixture_protocol(transport, setting, 4, np.random.default_rng(3), examples_per_task=2)

    assert result.complete
    assert transport.peak_in_flight <= 2
    assert sorted(d.prompt_id for d in result.distributions) == ['0', '1', '2', '3']
    for d in result.distributions:
        np.testing.assert_allclose(d.probabilities, [0.6, 0.1, 0.2], atol=1e-12)
        assert d.other == pytest.approx(0.1, abs=1e-12)

    summary = result.summary()
    assert summary['n'] == 4 and summary['failed'] == 0
    assert summary['p_capital']['p50'] == pytest.approx(0.6)

    write_protocol_result(tmp_path / 'distributions.csv', tmp_path / 'failures.csv', result)
    with open(tmp_path / 'distributions.csv', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['prompt_id', 'p_capital', 'p_continent', 'p_capitalize', 'other']
    assert [r[0] for r in rows[1:]] == ['0', '1', '2', '3']
    with open(tmp_path / 'failures.csv', encoding='utf-8') as f:
        assert list(csv.reader(f)) == [['prompt_id', 'category', 'message']]
    json.dumps(summary)


async def test_protocol_reports_failed_prompts():
    twins = TaskSetting(
        name='twins', task_names=('left', 'right'), sample_input=lambda rng: int(rng.integers(10, 100)),
        render_input=str, answer_fns=(str, str),
    )
    transport = MockTransport(PrefixTableModel(prompt_alphabet(), default={'\n': 1.0}))
    result = await run_mixture_protocol(transport, twins, 3, np.random.default_rng(0), examples_per_task=1)
    assert not result.complete
    assert result.distributions == []
    assert [f.category for f in result.failures] == ['collision'] * 3
    assert result.summary()['failed'] == 3
    assert transport.calls == 0
