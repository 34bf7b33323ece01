"""Outcome of each acceptance criterion, printed at the end of the session."""

RESULTS = {}


def record(number, passed, detail):
    RESULTS[number] = (bool(passed), detail)
    print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def lines():
    return [f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
            for n, (ok, detail) in sorted(RESULTS.items())]
