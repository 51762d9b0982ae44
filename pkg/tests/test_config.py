from dataclasses import dataclass, field

import pytest

from plansafe.config import canonical_json, config_hash, from_dict, merge, to_dict


@dataclass(frozen=True)
class Inner:
    a: float = 1.0
    names: tuple = ("x",)


@dataclass(frozen=True)
class Outer:
    n: int = 2
    flag: bool = False
    inner: Inner = field(default_factory=Inner)


def test_round_trip():
    o = Outer(3, True, Inner(2.5, ("a", "b")))
    assert from_dict(Outer, to_dict(o)) == o


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown"):
        from_dict(Outer, {"n": 1, "bogus": 2})
    with pytest.raises(ValueError, match="unknown"):
        from_dict(Outer, {"inner": {"zzz": 1}})


def test_type_checks():
    with pytest.raises(ValueError):
        from_dict(Outer, {"n": 1.5})
    with pytest.raises(ValueError):
        from_dict(Outer, {"flag": "yes"})


def test_hash_stable_and_sensitive():
    assert config_hash(Outer()) == config_hash(Outer())
    assert config_hash(Outer()) != config_hash(Outer(n=4))
    assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})


def test_merge_nested():
    assert merge({"a": {"b": 1, "c": 2}}, {"a": {"c": 3}}) == {"a": {"b": 1, "c": 3}}
