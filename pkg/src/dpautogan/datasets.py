"""Bundled datasets: the UCI ADULT census loader and a small synthetic mixture for smoke tests."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .data import ColumnSpec, DataError, Schema, Table

ADULT_FIELDS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "salary",
)

_WORKCLASS = ("Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov", "Local-gov",
              "State-gov", "Without-pay", "Never-worked", "?")
_EDUCATION = ("Bachelors", "Some-college", "11th", "HS-grad", "Prof-school", "Assoc-acdm",
              "Assoc-voc", "9th", "7th-8th", "12th", "Masters", "1st-4th", "10th", "Doctorate",
              "5th-6th", "Preschool")
_MARITAL = ("Married-civ-spouse", "Divorced", "Never-married", "Separated", "Widowed",
            "Married-spouse-absent", "Married-AF-spouse")
_OCCUPATION = ("Tech-support", "Craft-repair", "Other-service", "Sales", "Exec-managerial",
               "Prof-specialty", "Handlers-cleaners", "Machine-op-inspct", "Adm-clerical",
               "Farming-fishing", "Transport-moving", "Priv-house-serv", "Protective-serv",
               "Armed-Forces", "?")
_RELATIONSHIP = ("Wife", "Own-child", "Husband", "Not-in-family", "Other-relative", "Unmarried")
_RACE = ("White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black")
_COUNTRY = ("United-States", "Cambodia", "England", "Puerto-Rico", "Canada", "Germany",
            "Outlying-US(Guam-USVI-etc)", "India", "Japan", "Greece", "South", "China", "Cuba",
            "Iran", "Honduras", "Philippines", "Italy", "Poland", "Jamaica", "Vietnam", "Mexico",
            "Portugal", "Ireland", "France", "Dominican-Republic", "Laos", "Ecuador", "Taiwan",
            "Haiti", "Columbia", "Hungary", "Guatemala", "Nicaragua", "Scotland", "Thailand",
            "Yugoslavia", "El-Salvador", "Trinadad&Tobago", "Peru", "Hong", "Holand-Netherlands", "?")

# Category lists come from adult.names ("?" kept as its own category); the
# continuous bounds are the documented ranges of the census extract.
ADULT_SCHEMA = Schema(
    columns=(
        ColumnSpec("age", "continuous", min=17.0, max=90.0),
        ColumnSpec("workclass", "categorical", _WORKCLASS),
        ColumnSpec("education", "categorical", _EDUCATION),
        ColumnSpec("marital-status", "categorical", _MARITAL),
        ColumnSpec("occupation", "categorical", _OCCUPATION),
        ColumnSpec("relationship", "categorical", _RELATIONSHIP),
        ColumnSpec("race", "categorical", _RACE),
        ColumnSpec("sex", "binary_label", ("Female", "Male")),
        ColumnSpec("capital-gain", "continuous", min=0.0, max=99999.0),
        ColumnSpec("capital-loss", "continuous", min=0.0, max=4356.0),
        ColumnSpec("hours-per-week", "continuous", min=1.0, max=99.0),
        ColumnSpec("native-country", "categorical", _COUNTRY),
        ColumnSpec("salary", "binary_label", ("<=50K", ">50K")),
    ),
    drop=("fnlwgt", "education-num"),
)

ADULT_TRAIN_ROWS = 32561
ADULT_TEST_ROWS = 16281


def default_adult_dir() -> Path:
    return Path(os.environ.get("ADULT_DIR", Path.home() / ".cache" / "dpautogan" / "adult"))


def adult_available(directory=None) -> bool:
    d = Path(directory) if directory else default_adult_dir()
    return (d / "adult.data").is_file() and (d / "adult.test").is_file()


def _read(path: Path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if len(row) != len(ADULT_FIELDS):
                continue  # blank lines and the "|1x3 Cross validator" banner
            rec = dict(zip(ADULT_FIELDS, (v.strip() for v in row)))
            rec["salary"] = rec["salary"].rstrip(".")
            rows.append([rec[n] for n in ADULT_SCHEMA.names])
    return rows


def load_adult(directory=None) -> Table:
    """All 48842 rows, ``adult.data`` first, so ``split(t, 2/3, preserve_order=True)``
    reproduces the canonical 32561/16281 train/test partition."""
    d = Path(directory) if directory else default_adult_dir()
    if not adult_available(d):
        raise DataError(f"ADULT files not found in {d}")
    return Table.from_rows(ADULT_SCHEMA, _read(d / "adult.data") + _read(d / "adult.test"))


TOY_SCHEMA = Schema(columns=(
    ColumnSpec("color", "categorical", ("red", "green", "blue")),
    ColumnSpec("shape", "categorical", ("circle", "square", "star", "hexagon", "cross")),
    ColumnSpec("size", "continuous", min=0.0, max=10.0),
))


def toy_mixture(m: int = 2000, seed: int = 0) -> Table:
    """Synthetic mixed-type table for end-to-end checks.

    ``color`` has an 80% majority class, ``shape`` depends on ``color`` and
    ``size`` is a two-component Gaussian mixture clipped to [0, 10].
    """
    rng = np.random.default_rng(seed)
    color = rng.choice(3, m, p=[0.8, 0.15, 0.05])
    shape = (rng.choice(5, m, p=[0.3, 0.25, 0.2, 0.15, 0.1]) + color) % 5
    low = rng.random(m) < 0.4
    size = np.where(low, rng.normal(2.5, 0.8, m), rng.normal(7.0, 1.0, m)).clip(0.0, 10.0)
    return Table(TOY_SCHEMA, {"color": color, "shape": shape, "size": size})
