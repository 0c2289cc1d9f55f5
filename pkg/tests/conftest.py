import re

CRITERIA = {
    1: "metric oracle suite (exact gIOU/aeIOU/gaeIOU values)",
    2: "Property P fuzz: gaeIOU clean, aeIOU violated",
    3: "gradient correctness vs central finite differences",
    4: "parameter-count formula d(|E|+2|T|+2|R|)+4d^2",
    5: "intersection invariants over 10^4 random box sets",
    6: "negative-sampler soundness (exhaustive small KB)",
    7: "learnability on the planted synthetic TKB",
    8: "ranking equals the brute-force oracle exactly",
    9: "WIKIDATA12k loader statistics",
    10: "seed-fixed determinism (checkpoints and reports)",
}


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    outcome: dict[int, str] = {}
    for status in ("passed", "failed", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance.py::" not in report.nodeid:
                continue
            match = re.search(r"test_c(\d{2})_", report.nodeid)
            if not match:
                continue
            num = int(match.group(1))
            label = status.upper()
            if num in outcome and outcome[num] != label:
                label = "FAILED" if "FAILED" in (outcome[num], label) else label
            outcome[num] = label
    if not outcome:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(outcome):
        terminalreporter.write_line(
            f"criterion {num:2d}: {outcome[num]:7s} {CRITERIA.get(num, '')}"
        )
