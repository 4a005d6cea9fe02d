"""Python bindings for the raglab C++ core."""

import json as _json

from ._raglab import (  # noqa: F401
    ConfigError,
    DimensionError,
    FormatError,
    Model,
    RaglabError,
    RangeError,
    cover_exact_match,
    exact_match,
    flow_sum,
    kape_score,
    normalize_answer,
    normalize_pair,
    run_cli,
    segment_changepoint,
    segment_quartile,
    sign_test_p,
    token_f1,
)
from . import _raglab


def generate_world(**params):
    """Synthetic fact world as a dict (same layout as world.json)."""
    return _json.loads(_raglab.generate_world_json(**params))


def make_dataset(world, seed=1):
    """QA examples for every fact of a world dict."""
    return _json.loads(_raglab.dataset_json(_json.dumps(world), seed))


def read_csv_report(path):
    """Parse a report CSV into (comments, header, rows); comment lines start with '#'."""
    import csv

    comments, body = [], []
    with open(path, newline="") as f:
        for line in f:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                body.append(line)
    rows = list(csv.reader(body))
    return comments, rows[0], rows[1:]
