"""Model formula mini-language.

    formula := ident "~" term ("+" term)*
    term    := "1" | "-1" | "spatial" | ident
"""

from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = ["FormulaError", "ModelSpec", "parse_formula", "format_formula", "FAMILIES"]

FAMILIES = ("normal", "bernoulli")
SPATIAL = "spatial"
_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9._]*")
_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z][A-Za-z0-9._]*)|(?P<num>-?\s*\d+)|(?P<op>[~+]))")


class FormulaError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


@dataclass(frozen=True)
class ModelSpec:
    response: str
    covariates: tuple[str, ...] = ()
    intercept: bool = True
    spatial: bool = False
    family: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.family not in FAMILIES:
            raise FormulaError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.response in self.covariates:
            raise FormulaError(f"response {self.response!r} also appears as a covariate")
        if len(set(self.covariates)) != len(self.covariates):
            raise FormulaError("duplicate covariate")

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return (("(Intercept)",) if self.intercept else ()) + self.covariates

    def with_family(self, family: str) -> "ModelSpec":
        return ModelSpec(self.response, self.covariates, self.intercept, self.spatial, family)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaError(f"unexpected character {text[pos:].lstrip()[0]!r}", len(text) - len(text[pos:].lstrip()))
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "num":
            value = value.replace(" ", "")
            if value not in ("1", "-1"):
                raise FormulaError(f"invalid term {value!r}", start)
        tokens.append((kind, value, start))
        pos = m.end()
    return tokens


def parse_formula(text: str, family: str = "normal") -> ModelSpec:
    tokens = _tokenize(text)
    if not tokens or tokens[0][0] != "ident":
        raise FormulaError("formula must start with a response name", tokens[0][2] if tokens else 0)
    response = tokens[0][1]
    if len(tokens) < 2 or tokens[1][1] != "~":
        pos = tokens[1][2] if len(tokens) > 1 else len(text)
        raise FormulaError("expected '~' after the response", pos)
    rhs = tokens[2:]
    if not rhs:
        raise FormulaError("empty right-hand side", len(text))

    intercept = True
    spatial = False
    covariates: list[str] = []
    expect_term = True
    for kind, value, pos in rhs:
        if expect_term:
            if kind == "op":
                raise FormulaError(f"expected a term, found {value!r}", pos)
            if value == "-1":
                intercept = False
            elif value == "1":
                intercept = True
            elif value == SPATIAL:
                if spatial:
                    raise FormulaError("'spatial' given more than once", pos)
                spatial = True
            else:
                if value in covariates:
                    raise FormulaError(f"duplicate covariate {value!r}", pos)
                covariates.append(value)
        elif value != "+":
            raise FormulaError(f"expected '+', found {value!r}", pos)
        expect_term = not expect_term
    if expect_term:
        raise FormulaError("formula ends with '+'", len(text))
    return ModelSpec(response, tuple(covariates), intercept, spatial, family)


def format_formula(spec: ModelSpec) -> str:
    terms = ["1" if spec.intercept else "-1", *spec.covariates]
    if spec.spatial:
        terms.append(SPATIAL)
    return f"{spec.response} ~ {' + '.join(terms)}"
