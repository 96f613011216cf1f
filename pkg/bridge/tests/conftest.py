import pytest


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small randomly initialised BERT-style checkpoint built offline."""
    import torch
    from transformers import BertConfig, BertForMaskedLM, BertTokenizerFast

    directory = tmp_path_factory.mktemp("tiny-bert")
    words = [
        "she", "he", "my", "mother", "father", "sister", "brother", "is",
        "works", "as", "a", "the", "nurse", "secretary", "carpenter",
        "plumber", "clerk", "photographer", "wants", "to", "become", "taper",
        ".", ",", "techni", "##cian", "medical", "records", "son",
    ]
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + words
    tokenizer = BertTokenizerFast(vocab={t: i for i, t in enumerate(vocab)},
                                  do_lower_case=True)
    tokenizer.save_pretrained(directory)

    torch.manual_seed(42)
    config = BertConfig(
        vocab_size=len(vocab), hidden_size=32, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertForMaskedLM(config)
    model.save_pretrained(directory)
    return directory


@pytest.fixture(scope="session")
def backend(tiny_checkpoint):
    from mlmbridge.backend import HfMlmBackend

    return HfMlmBackend(str(tiny_checkpoint))


@pytest.fixture(scope="session")
def app(backend):
    from mlmbridge.jobs import JobRegistry
    from mlmbridge.service import create_app

    return create_app(backend, JobRegistry())


@pytest.fixture(scope="session")
def client(app):
    from fastapi.testclient import TestClient

    with TestClient(app, raise_server_exceptions=False) as test_client:
        yield test_client
