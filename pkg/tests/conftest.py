import contextlib

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion's verdict for the end-of-run report."""
    detail = []
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE[number] = ("FAIL", title, f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    ACCEPTANCE[number] = ("PASS", title, "; ".join(detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {verdict}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
