import argparse

from services.law_service import MQ_LAW_FORMS, parse_mq_law
from services.point_process_service import POINT_PROCESS_FORMS, parse_point_process


def law_catalogue() -> list[tuple[str, str, str]]:
    """(kind, text form, what is available in closed form) for every stock law."""
    rows = []
    for text in MQ_LAW_FORMS.values():
        law = parse_mq_law(text)
        rows.append(("mq", text, "analytics" if law.analytics() is not None else "sampler only"))
    for text in POINT_PROCESS_FORMS.values():
        pp = parse_point_process(text)
        rows.append(("pp", text, "enumerable" if pp.is_enumerable() else "sampler only"))
    return rows


class LawsCommand:
    name = "list-laws"
    help = "List the stock laws with their text forms"

    def configure(self, parser: argparse.ArgumentParser) -> None:
        pass

    def __call__(self, args: argparse.Namespace) -> int:
        rows = law_catalogue()
        width = max(len(text) for _, text, _ in rows)
        for kind, text, available in rows:
            print(f"{kind:<3} {text:<{width}}  {available}")
        return 0
