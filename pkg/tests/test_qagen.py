from collections import Counter

import pytest

from aedqa.backends import MockBackend, TransportError
from aedqa.core import CellTuple, ChartRef, Document, ModalityRef, QAPair, TableRecord
from aedqa.qagen import (
    QaGenConfig,
    UnparseableGeneration,
    generate_qa_pairs,
    parse_pairs,
    quality_check,
    split_for_review,
)
from conftest import write_chart

TEXT = "全国规模以上工业增加值同比增长4.6%。社会消费品零售总额38336.9亿元。\n\ntable1\n"


def make_doc(charts=()):
    return Document(
        "d1",
        TEXT + "".join(f"\n{c.tag}\n" for c in charts),
        tables=(TableRecord("table1", "", (CellTuple("煤炭", "2024", "12"),)),),
        charts=tuple(charts),
    )


def only_tables():
    return QaGenConfig(pairs_per_text=0, pairs_per_table=2, pairs_per_chart=0)


def test_two_blocks_for_table():
    mock = MockBackend(lambda c: "Q: 2024年煤炭产量?\nA: 12\n\nQ: 哪一年的数据?\nA: 2024年")
    pairs, warnings = generate_qa_pairs(make_doc(), only_tables(), mock, mock)
    assert [p.modalities for p in pairs] == [(ModalityRef.table(1),)] * 2
    assert [p.id for p in pairs] == ["d1-q001", "d1-q002"]
    assert "(煤炭, 2024, 12)" in mock.calls[0].user
    assert warnings == []


def test_yes_no_filtered():
    mock = MockBackend(lambda c: "Q: Is it true that output rose?\nA: Yes\n\nQ: 产量是多少?\nA: 12")
    pairs, warnings = generate_qa_pairs(make_doc(), only_tables(), mock, mock)
    assert [p.gold_answer for p in pairs] == ["12"]
    assert any("YesNoFiltered" in w for w in warnings)


def test_duplicate_answers_pruned():
    mock = MockBackend(lambda c: "Q: 产量?\nA: 12\n\nQ: 煤炭?\nA: 12")
    pairs, warnings = generate_qa_pairs(make_doc(), only_tables(), mock, mock)
    assert len(pairs) == 1 and any("DuplicateAnswer" in w for w in warnings)


def test_no_charts_warns():
    cfg = QaGenConfig(pairs_per_text=0, pairs_per_table=0, pairs_per_chart=2)
    mock = MockBackend()
    pairs, warnings = generate_qa_pairs(make_doc(), cfg, mock, mock)
    assert pairs == [] and any("NoCharts" in w for w in warnings)
    assert mock.count() == 0


def test_chart_pairs_use_vision(tmp_path):
    path = write_chart(tmp_path / "c.png", 4)
    chart = ChartRef("img1", path)
    vision = MockBackend(vision_script=lambda c: "Q: 11月发电量增速?\nA: 0.1%" if c.image else None)
    chat = MockBackend()
    cfg = QaGenConfig(pairs_per_text=0, pairs_per_table=0, pairs_per_chart=1)
    pairs, _ = generate_qa_pairs(make_doc([chart]), cfg, chat, vision)
    assert pairs[0].modalities == (ModalityRef.chart(1),)
    assert vision.count("vision") == 1 and chat.count() == 0


def test_malformed_generation():
    with pytest.raises(UnparseableGeneration):
        parse_pairs("Here are some questions about the table.")
    mock = MockBackend(lambda c: "just prose")
    with pytest.raises(UnparseableGeneration):
        generate_qa_pairs(make_doc(), only_tables(), mock, mock)


def pairs_n(n, answers=None):
    return [
        QAPair(f"d1-q{i:03d}", "d1", f"问题{i}?", answers[i] if answers else str(i), (ModalityRef.text(),))
        for i in range(n)
    ]


def test_split_sizes_and_partition():
    pairs = pairs_n(100)
    manual, rest = split_for_review(pairs, QaGenConfig())
    assert len(manual) == 25 and len(rest) == 75
    assert Counter(p.id for p in manual + rest) == Counter(p.id for p in pairs)
    assert split_for_review(pairs, QaGenConfig()) == (manual, rest)
    assert split_for_review(pairs, QaGenConfig(seed=7)) != (manual, rest)
    assert len(split_for_review(pairs_n(7), QaGenConfig())[0]) == 2


def test_all_valid_means_no_flags():
    manual, verified, flagged = quality_check(pairs_n(20), QaGenConfig(), MockBackend(lambda c: "VALID"))
    assert flagged == [] and len(manual) == 5 and len(verified) == 15


def test_judge_flags_answers_missing_from_document():
    doc = make_doc()
    answers = ["4.6%", "38336.9亿元", "99.9%", "12", "火星", "工业增加值", "7.7亿元", "煤炭"] * 3

    def judge(call):
        answer = call.user.rsplit("\nA: ", 1)[1]
        return "VALID" if answer in call.user.rsplit("\n\nQ: ", 1)[0] else "INVALID: answer not in content"

    pairs = pairs_n(len(answers), answers)
    manual, verified, flagged = quality_check(pairs, QaGenConfig(), MockBackend(judge), {"d1": doc})
    expected = [p.id for p in verified if p.gold_answer not in TEXT + "(煤炭, 2024, 12)"]
    assert [f.pair.id for f in flagged] == expected and expected
    assert all(f.reason == "answer not in content" for f in flagged)


def test_judge_errors_recorded_not_fatal():
    def judge(call):
        if "问题3?" in call.user:
            raise TransportError("boom")
        return "VALID"

    manual, verified, flagged = quality_check(pairs_n(8), QaGenConfig(manual_ratio=0.0), MockBackend(judge))
    assert len(verified) == 8
    assert [(f.pair.id, f.reason.startswith("error: TransportError")) for f in flagged] == [("d1-q003", True)]


def test_quality_check_rejects_empty():
    with pytest.raises(ValueError):
        quality_check([], QaGenConfig(), MockBackend())
