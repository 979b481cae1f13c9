"""Python access to the semtok C++ core."""

import json

from . import _semtok
from ._semtok import ConfigError, ParseError, TrainingError, ValidationError

__all__ = [
    "ConfigError",
    "ParseError",
    "TrainingError",
    "ValidationError",
    "build_ranks",
    "embed",
    "generate",
    "run_cli",
    "similarity_report",
    "train",
    "verify",
    "version",
    "weight_table",
]

version = _semtok.version
weight_table = _semtok.weight_table
embed = _semtok.embed
similarity_report = _semtok.similarity_report
verify = _semtok.verify


def _dump(config):
    return "" if config is None else json.dumps(config)


def run_cli(*args):
    """Run one `semtok` command. Returns (exit_code, stdout, stderr)."""
    return _semtok.run_cli([str(a) for a in args])


def build_ranks(record, context_length):
    """Rank matrix (uint8, L x L) of a record given as a dict or JSON text."""
    text = record if isinstance(record, str) else json.dumps(record)
    return _semtok.build_ranks(text, context_length)


def generate(n, seed=0, spec=None, prefix="scene"):
    """Synthetic records as dicts in the interchange layout."""
    return [json.loads(line) for line in _semtok.generate(n, seed, _dump(spec), prefix)]


def train(corpus, out_dir, train_config=None, encoder_config=None):
    """Train on a corpus file; returns steps, last loss, metric records and the checkpoint path."""
    result = _semtok.train(str(corpus), str(out_dir), _dump(train_config), _dump(encoder_config))
    result["log"] = [json.loads(line) for line in result["log"]]
    return result
