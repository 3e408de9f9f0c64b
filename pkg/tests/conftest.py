import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    terminalreporter.write_line("[criterion 1] NOTE: published corpus-scale CCC figures are not reproducible "
                                "here; criteria 2-9 substitute for them")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
