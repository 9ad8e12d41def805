import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evfi import fileio
from evfi.events import EventStream, random_stream
from evfi.fileio import FormatError


def test_event_round_trip_binary_and_csv(tmp_path):
    s = random_stream(np.random.default_rng(0), 200)
    fileio.write_events(tmp_path / "e.evt", s)
    assert fileio.read_events(tmp_path / "e.evt").same_as(s)
    fileio.write_events(tmp_path / "e.csv", s)
    assert fileio.read_events(tmp_path / "e.csv").same_as(s)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[1] == "t_us,x,y,p"


def test_empty_stream_round_trip():
    s = EventStream.empty(5, 4, 10, 20)
    assert fileio.decode_events(fileio.encode_events(s)).same_as(s)


def test_csv_without_metadata_infers_geometry(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("t_us,x,y,p\n5,1,2,1\n9,3,0,-1\n")
    s = fileio.read_events(path)
    assert (s.width, s.height, s.t_start, s.t_end, len(s)) == (4, 3, 5, 9, 2)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,x,y,p\n1,0,0,1\n")
    with pytest.raises(FormatError):
        fileio.read_events(path)


def test_truncated_events_report_offset():
    buf = fileio.encode_events(random_stream(np.random.default_rng(1), 10))
    with pytest.raises(FormatError) as err:
        fileio.decode_events(buf[:-3])
    assert err.value.offset == 4 + 28
    with pytest.raises(FormatError, match="magic"):
        fileio.decode_events(b"EVT2" + buf[4:])
    with pytest.raises(FormatError, match="trailing"):
        fileio.decode_events(buf + b"\0")


def test_flow_layout_is_interleaved():
    flow = np.zeros((2, 1, 2), dtype=np.float32)
    flow[0, 0] = [1.0, 2.0]
    flow[1, 0] = [3.0, 4.0]
    buf = fileio.encode_flow(flow)
    assert buf[:4] == b"FLO1"
    body = np.frombuffer(buf[12:], dtype="<f4")
    np.testing.assert_array_equal(body, [1.0, 3.0, 2.0, 4.0])
    with pytest.raises(ValueError):
        fileio.encode_flow(np.zeros((3, 2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_flow_round_trip_bit_exact(h, w, seed):
    flow = np.random.default_rng(seed).normal(size=(2, h, w)).astype(np.float32)
    assert fileio.decode_flow(fileio.encode_flow(flow)).tobytes() == flow.tobytes()


def test_checkpoint_round_trip_and_digest(tmp_path):
    rng = np.random.default_rng(2)
    params = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": np.float32(1.5) * np.ones(()),
              "c": np.zeros((0, 4), dtype=np.float32)}
    digest = fileio.save_checkpoint(tmp_path / "m.ckpt", params)
    back = fileio.load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert fileio.checkpoint_digest(back) == digest
    assert fileio.encode_checkpoint(back) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    buf = fileio.encode_checkpoint({"w": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(FormatError, match="version"):
        fileio.decode_checkpoint(buf[:8] + (2).to_bytes(4, "little") + buf[12:])
    with pytest.raises(FormatError, match="truncated"):
        fileio.decode_checkpoint(buf[:-1])
    with pytest.raises(FileNotFoundError):
        fileio.load_checkpoint(tmp_path / "missing.ckpt")


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for c in (1, 3):
        px = rng.integers(0, 256, size=(c, 5, 7)).astype(np.uint8)
        path = tmp_path / f"img{c}.pnm"
        fileio.write_image(path, px)
        np.testing.assert_array_equal(fileio.to_uint8(fileio.read_image(path)), px)
    with pytest.raises(ValueError):
        fileio.encode_pnm(np.zeros((2, 3, 3)))


def test_pnm_header_comments_and_errors():
    body = bytes(range(6))
    img = fileio.decode_pnm(b"P5\n# comment\n3 2\n255\n" + body)
    assert img.shape == (1, 2, 3) and img.tobytes() == body
    with pytest.raises(FormatError):
        fileio.decode_pnm(b"P2\n3 2\n255\n" + body)
    with pytest.raises(FormatError):
        fileio.decode_pnm(b"P5\n3 2\n65535\n" + body)
    with pytest.raises(FormatError, match="truncated"):
        fileio.decode_pnm(b"P5\n3 2\n255\n" + body[:4])
