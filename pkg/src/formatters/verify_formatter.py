from services.verify_service import CheckResult


def _value(result: CheckResult) -> str:
    return "" if result.value is None else f"{result.value:.6g}"


def format_verify_table(results: list[CheckResult]) -> str:
    header = ("suite", "check", "result", "value", "detail")
    rows = [
        (r.suite, r.check, "pass" if r.passed else "FAIL", _value(r), r.detail)
        for r in results
    ]
    widths = [max(len(row[i]) for row in (header, *rows)) for i in range(len(header) - 1)]

    def line(row) -> str:
        cells = [cell.ljust(width) for cell, width in zip(row, widths)]
        return "  ".join((*cells, row[-1])).rstrip()

    lines = [line(header), line(tuple("-" * w for w in widths) + ("",))]
    lines.extend(line(row) for row in rows)
    failed = sum(1 for r in results if not r.passed)
    lines.append("")
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
