import pytest

VERDICTS: dict[int, str] = {}


class Detail:
    def __init__(self):
        self.text = ""

    def __call__(self, text: str) -> None:
        self.text = text


@pytest.fixture
def detail(request):
    d = Detail()
    request.node._criterion_detail = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    d = getattr(item, "_criterion_detail", None)
    text = d.text if d is not None and d.text else ""
    if report.failed:
        msg = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else ""
        text = f"{text}; {msg}" if text else msg
    verdict = "PASS" if report.passed else "FAIL"
    line = f"{verdict} criterion {number:2d}: {title}" + (f" ({text})" if text else "")
    VERDICTS[number] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
