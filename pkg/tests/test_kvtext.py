import pytest

from kladapt import kvtext


def test_sections_and_lists():
    sec = kvtext.loads("""
# comment
name = demo
x0 = [[0.4, -1],
      [0.6, 0.5]]
a = 1, b = 2
run_a {
  controller = example-a   # trailing comment
  checks = [ios]
}
""")
    assert sec["name"] == "demo"
    assert kvtext.parse_list(sec["x0"]) == ["[0.4, -1]", "[0.6, 0.5]"]
    assert sec.get_float("a") == 1.0 and sec.get_int("b") == 2
    run = sec.section("run_a")
    assert run["controller"] == "example-a"
    assert run.get_list("checks") == ["ios"]


def test_missing_field_named():
    with pytest.raises(kvtext.KVError, match="'t_end'"):
        kvtext.loads("a = 1").need("t_end")


@pytest.mark.parametrize("text, msg", [
    ("a = 1\na = 2", "duplicate"),
    ("s {\n a = 1", "not closed"),
    ("}", "unmatched"),
    ("a = (1, 2", "unterminated"),
    ("just words", "expected"),
])
def test_errors(text, msg):
    with pytest.raises(kvtext.KVError, match=msg):
        kvtext.loads(text)


def test_error_carries_line():
    with pytest.raises(kvtext.KVError) as info:
        kvtext.loads("a = 1\n\nb 2")
    assert info.value.line == 3


def test_round_trip():
    sec = kvtext.Section()
    sec["n"] = "2"
    sub = kvtext.Section("inner")
    sub["u"] = "(+ x1 (* 2 th1))"
    sec["inner"] = sub
    again = kvtext.loads(kvtext.dumps(sec))
    assert again == sec


def test_number_errors():
    sec = kvtext.loads("a = abc\nb = 1.5\nc = [1, x]")
    with pytest.raises(kvtext.KVError, match="number"):
        sec.get_float("a")
    with pytest.raises(kvtext.KVError, match="integer"):
        sec.get_int("b")
    with pytest.raises(kvtext.KVError, match="numbers"):
        sec.get_floats("c")
