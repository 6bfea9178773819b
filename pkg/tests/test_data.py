import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_stats
from strategies import records
from somnus.data import (AWAKE, NREM, REM, Event, ExclusionError, RecordError, SleepRecord, SufficientStats,
                         derive_sufficient_stats, epoch_event_indicator, parse_records, read_records,
                         serialize_records, sleep_summaries, write_records)

EPOCH_HDR = "patient_id,epoch,stage\n"
EVENT_HDR = "patient_id,start_sec,duration_sec,stage\n"


def epochs_csv(pid, letters):
    return EPOCH_HDR + "".join(f"{pid},{j},{s}\n" for j, s in enumerate(letters))


def test_minimal_record():
    recs = parse_records(epochs_csv("a", "NNR"), EVENT_HDR)
    assert len(recs) == 1
    assert recs[0].n_epochs == 3
    assert recs[0].events == []
    assert list(recs[0].stages) == [NREM, NREM, REM]


def test_event_inside_nonrem_epoch_is_accepted():
    recs = parse_records(epochs_csv("a", "NNR"), EVENT_HDR + "a,45,10,N\n")
    assert recs[0].events == [Event(45.0, 10.0, NREM)]


def test_byte_streams_are_accepted():
    recs = parse_records(io.BytesIO(epochs_csv("a", "RN").encode()), io.BytesIO(EVENT_HDR.encode()))
    assert recs[0].patient_id == "a"


def test_patient_without_rem_is_excluded():
    with pytest.raises(ExclusionError) as err:
        parse_records(epochs_csv("a", "NNNN"), EVENT_HDR)
    assert err.value.patient_id == "a"
    excluded = []
    text = epochs_csv("a", "NNNN") + epochs_csv("b", "NR")[len(EPOCH_HDR):]
    recs = parse_records(text, EVENT_HDR, exclusions=excluded)
    assert [r.patient_id for r in recs] == ["b"]
    assert [e.patient_id for e in excluded] == ["a"]


@pytest.mark.parametrize("epochs,events,needle", [
    (EPOCH_HDR + "a,0,N\na,1,X\n", EVENT_HDR, "epochs.csv:3"),
    (EPOCH_HDR + "a,0,N\na,2,R\n", EVENT_HDR, "epochs.csv:3"),
    (EPOCH_HDR + "a,0,N\na,1\n", EVENT_HDR, "epochs.csv:3"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "a,0,20,N\na,15,10,N\n", "overlaps"),
    (epochs_csv("a", "ANR"), EVENT_HDR + "a,5,10,N\n", "Awake"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "a,5,8,N\n", "shorter"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "a,85,10,R\n", "outside"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "a,5,10,R\n", "labelled"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "b,5,10,N\n", "unknown patient"),
    (epochs_csv("a", "NNR"), EVENT_HDR + "a,abc,10,N\n", "events.csv:2"),
    ("patient,epoch,stage\n", EVENT_HDR, "header"),
])
def test_malformed_inputs(epochs, events, needle):
    with pytest.raises(RecordError) as err:
        parse_records(epochs, events)
    assert needle in str(err.value)


def test_noncontiguous_patient_rows():
    text = EPOCH_HDR + "a,0,N\nb,0,N\na,1,R\n"
    with pytest.raises(RecordError, match="contiguous"):
        parse_records(text, EVENT_HDR)


def record(letters, events=()):
    codes = {"A": AWAKE, "R": REM, "N": NREM}
    return SleepRecord("p", [codes[c] for c in letters], list(events))


def test_indicator_without_events():
    assert list(epoch_event_indicator(record("NNRR"))) == [0, 0, 0, 0]


def test_indicator_spanning_boundary():
    rec = record("NNR", [Event(25, 15, NREM)])
    assert list(epoch_event_indicator(rec)) == [1, 1, 0]


def test_indicator_half_open_boundary():
    rec = record("NNR", [Event(30, 10, NREM)])
    assert list(epoch_event_indicator(rec)) == [0, 1, 0]


def test_indicator_zero_on_awake_epochs():
    rec = record("NAR", [Event(25, 15, NREM)])
    assert list(epoch_event_indicator(rec)) == [1, 0, 0]


def test_stats_hand_example_nnr():
    st_ = derive_sufficient_stats([record("NNR")])
    c = st_.counts[0]
    expected = np.zeros((2, 2, 3))
    expected[0, 1, NREM] = 1
    expected[0, 1, REM] = 1
    np.testing.assert_array_equal(c, expected)
    assert st_.at_risk[0][0, 1] == 2
    np.testing.assert_array_equal(st_.events[0], [0, 0])
    np.testing.assert_array_equal(st_.exposure[0], [30, 60])


def test_stats_rr_single_event():
    # two REM epochs plus a NonREM tail so the record is valid
    rec = record("RRN", [Event(5, 10, REM)])
    st_ = derive_sufficient_stats([rec])
    assert st_.counts[0][1, 0, REM] == 1
    assert st_.events[0][0] == 1
    assert st_.exposure[0][0] == 60 - 10


def test_empty_events_exposure():
    rec = record("NARNR")
    st_ = derive_sufficient_stats([rec])
    np.testing.assert_array_equal(st_.events[0], [0, 0])
    np.testing.assert_array_equal(st_.exposure[0], [60, 60])


@given(records())
def test_stats_match_naive_oracle(rec):
    rec.validate()
    c, v, t = naive_stats(list(rec.stages), [(e.start_sec, e.duration_sec, e.stage) for e in rec.events])
    s = derive_sufficient_stats([rec])
    np.testing.assert_array_equal(s.counts[0], c)
    np.testing.assert_array_equal(s.events[0], v)
    np.testing.assert_allclose(s.exposure[0], t, atol=1e-9)


@given(records())
def test_multinomial_closure_and_epoch_accounting(rec):
    s = derive_sufficient_stats([rec])
    n = s.at_risk[0]
    np.testing.assert_array_equal(s.counts[0].sum(axis=-1), n)
    awake_nonfinal = int(np.sum(rec.stages[:-1] == AWAKE))
    assert n.sum() + 1 + awake_nonfinal == rec.n_epochs
    for k in (0, 1):
        assert 0 <= s.exposure[0][k] <= 30 * np.sum(rec.stages == k + 1) + 1e-9


@given(st.lists(records(), min_size=1, max_size=3))
def test_round_trip_is_bit_exact(recs):
    for i, r in enumerate(recs):
        r.patient_id = f"P{i}"
    ep, ev = serialize_records(recs)
    back = parse_records(ep, ev)
    assert back == recs
    assert serialize_records(back) == (ep, ev)


def test_round_trip_through_files(tmp_path):
    recs = [record("NNRA", [Event(12.5, 20.25, NREM)])]
    write_records(recs, tmp_path / "e.csv", tmp_path / "v.csv")
    assert read_records(tmp_path / "e.csv", tmp_path / "v.csv") == recs
    assert (tmp_path / "v.csv").read_text().splitlines()[1] == "p,12.5,20.25,N"


def test_sufficient_stats_json_round_trip():
    recs = [record("NNRA", [Event(12.5, 20, NREM)]), record("RN")]
    recs[1].patient_id = "q"
    s = derive_sufficient_stats(recs)
    obj = s.to_json()
    assert set(obj["p"]) == {"c", "n", "v", "t"}
    back = SufficientStats.from_json(obj)
    np.testing.assert_array_equal(back.counts, s.counts)
    np.testing.assert_array_equal(back.exposure, s.exposure)
    assert back.patient_ids == ["p", "q"]


def test_sufficient_stats_json_rejects_broken_closure():
    obj = derive_sufficient_stats([record("NNR")]).to_json()
    obj["p"]["n"][0][1] = 5
    with pytest.raises(RecordError):
        SufficientStats.from_json(obj)


def test_sleep_summaries():
    rec = record("N" * 120 + "R" * 60 + "A", [Event(0, 10, NREM), Event(3700, 10, REM)])
    s = sleep_summaries(rec)
    assert s["hours_nrem"] == 1.0 and s["hours_rem"] == 0.5
    assert s["ahi_nrem"] == 1.0 and s["ahi_rem"] == 2.0
    assert s["ahi"] == pytest.approx(2 / 1.5)
