"""Shared record of acceptance verdicts, one line per criterion."""

VERDICTS = {}


def format_line(number):
    ok, title, detail = VERDICTS[number]
    return f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def record(number, title, ok, detail):
    VERDICTS[number] = (bool(ok), title, detail)
    print(format_line(number))
    return bool(ok)
