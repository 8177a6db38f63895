import json

import pytest

from exceptions import GenerationError, PreconditionError
from models.generation import (ABSTAIN, FixtureGenerationClient, HttpGenerationClient, answer_prompt,
                               build_generation_client, format_options, load_prompt, option_letters, parse_answer,
                               prompt_hash)


class FakeResponse:
    def __init__(self, payload, status_code=200):
        self.payload = payload
        self.status_code = status_code

    def json(self):
        if isinstance(self.payload, Exception):
            raise self.payload
        return self.payload


class FakeSession:
    def __init__(self, *responses):
        self.responses = list(responses)
        self.bodies = []

    def post(self, url, json=None, timeout=None):
        self.bodies.append(json)
        return self.responses.pop(0)


def test_prompt_hash_separates_system_and_user():
    assert prompt_hash('ab', 'c') != prompt_hash('a', 'bc')
    assert len(prompt_hash('s', 'u')) == 64


def test_fixture_client_replays_transcripts():
    client = FixtureGenerationClient()
    client.add('system', 'user', 'Answer: B')

    assert client.generate('system', 'user') == 'Answer: B'
    with pytest.raises(GenerationError):
        client.generate('system', 'other')


def test_fixture_client_default_response():
    assert FixtureGenerationClient(default_response='Answer: C').generate('s', 'u') == 'Answer: C'


def test_fixture_client_from_file(tmp_path):
    path = tmp_path / 'transcripts.json'
    path.write_text(json.dumps({prompt_hash('s', 'u'): 'recorded'}))
    assert FixtureGenerationClient.from_file(path).generate('s', 'u') == 'recorded'

    path.write_text('[1, 2]')
    with pytest.raises(GenerationError):
        FixtureGenerationClient.from_file(path)

    path.write_text('{broken')
    with pytest.raises(GenerationError):
        FixtureGenerationClient.from_file(path)


def test_http_client_posts_system_and_user():
    session = FakeSession(FakeResponse({'text': 'Answer: A'}))
    client = HttpGenerationClient('http://llm.test', model='gpt-4o', session=session)

    assert client.generate('sys', 'usr') == 'Answer: A'
    assert session.bodies == [{'system': 'sys', 'user': 'usr', 'model': 'gpt-4o'}]


@pytest.mark.parametrize('response', [
    FakeResponse({'choices': []}),
    FakeResponse(ValueError('not json')),
    FakeResponse({}, status_code=400),
])
def test_http_client_failures_are_generation_errors(response):
    client = HttpGenerationClient('http://llm.test', session=FakeSession(response))
    with pytest.raises(GenerationError):
        client.generate('sys', 'usr')


def test_build_generation_client(run_config):
    client = build_generation_client(run_config.generation)
    assert isinstance(client, FixtureGenerationClient)
    assert client.generate('any', 'prompt') == 'Answer: A'


def test_prompt_templates():
    assert 'step by step' in load_prompt('answer_system')
    assert '{question}' in load_prompt('rewrite_step1_user')
    with pytest.raises(PreconditionError):
        load_prompt('missing_template')


def test_options_formatting():
    assert option_letters(4) == 'ABCD'
    assert format_options(['Yes', 'No']) == 'A. Yes\nB. No'
    with pytest.raises(PreconditionError):
        option_letters(0)
    with pytest.raises(PreconditionError):
        option_letters(27)


def test_answer_prompt_with_context_and_options():
    system, user = answer_prompt('Does aspirin help?', ['Yes', 'No'], context='[1] (1, 2020, D1) text')

    assert system == load_prompt('answer_system')
    assert user.startswith('Evidence:\n[1] (1, 2020, D1) text\n\nQuestion: Does aspirin help?\nA. Yes\nB. No\n\n')
    assert user.endswith('"Answer: <letter>".')


def test_answer_prompt_without_context():
    _, user = answer_prompt('Does aspirin help?', None)
    assert user.startswith('Question: Does aspirin help?\n\n')
    assert 'Evidence' not in user
    assert '<your answer>' in user


@pytest.mark.parametrize('text, expected', [
    ('Reasoning.\nAnswer: B', 'B'),
    ('Answer: A\nOn reflection...\nAnswer: (C)', 'C'),
    ('Answer: E', ABSTAIN),
    ('Answer: Absolutely yes', ABSTAIN),
    ('I am not sure.', ABSTAIN),
    ('', ABSTAIN),
])
def test_parse_answer(text, expected):
    assert parse_answer(text, ['a', 'b', 'c', 'd']) == expected


def test_parse_answer_without_options():
    assert parse_answer('Answer: Z') == 'Z'
