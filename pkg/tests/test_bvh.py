import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motiondiff.bvh import Joint, MotionChannels, Skeleton, parse_bvh, read_bvh, serialize_bvh, write_bvh
from motiondiff.errors import ParseError
from motiondiff.synthetic import demo_motion, demo_skeleton

MINIMAL = """HIERARCHY
ROOT Hips
{
\tOFFSET 0.000000 0.000000 0.000000
\tCHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
\tJOINT Chest
\t{
\t\tOFFSET 0.000000 10.000000 0.000000
\t\tCHANNELS 3 Zrotation Xrotation Yrotation
\t\tEnd Site
\t\t{
\t\t\tOFFSET 0.000000 5.000000 0.000000
\t\t}
\t}
}
MOTION
Frames: 1
Frame Time: 0.03333333
0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000
"""


def test_minimal_fixture():
    skel, motion = parse_bvh(MINIMAL)
    assert skel.names == ["Hips", "Chest"]
    assert skel.joints[1].parent == 0
    assert motion.values.shape == (1, 9)
    assert np.array_equal(motion.values, np.zeros((1, 9)))
    assert skel.joints[1].rotation_order == "ZXY"
    assert np.array_equal(skel.joints[1].end_site, [0.0, 5.0, 0.0])


def test_serialize_reproduces_fixture():
    assert serialize_bvh(*parse_bvh(MINIMAL)) == MINIMAL


def _equal(a, b):
    (s1, m1), (s2, m2) = a, b
    assert s1.names == s2.names
    for j1, j2 in zip(s1.joints, s2.joints):
        assert j1.parent == j2.parent and j1.channels == j2.channels
        assert np.array_equal(j1.offset, j2.offset)
        assert (j1.end_site is None) == (j2.end_site is None)
    assert m1.frame_time == m2.frame_time
    assert np.array_equal(m1.values, m2.values)


def test_fixed_point_round_trip():
    rng = np.random.default_rng(0)
    text = serialize_bvh(demo_skeleton(), demo_motion(1.0, 30, 1.0, rng))
    first = parse_bvh(text)
    _equal(parse_bvh(serialize_bvh(*first)), first)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_round_trip_within_print_precision(frames, seed):
    rng = np.random.default_rng(seed)
    skel = demo_skeleton()
    motion = MotionChannels(1 / 30, rng.uniform(-360, 360, (frames, skel.n_channels)))
    skel2, back = parse_bvh(serialize_bvh(skel, motion))
    assert np.max(np.abs(back.values - motion.values)) <= 1e-4
    for j1, j2 in zip(skel.joints, skel2.joints):
        assert np.max(np.abs(j1.offset - j2.offset)) <= 1e-4


def test_file_round_trip(tmp_path):
    skel, motion = parse_bvh(MINIMAL)
    write_bvh(tmp_path / "a.bvh", skel, motion)
    assert (tmp_path / "a.bvh").read_text() == MINIMAL
    _equal(read_bvh(tmp_path / "a.bvh"), (skel, motion))


def test_every_truncation_is_rejected():
    text = MINIMAL
    for cut in range(len(text)):
        with pytest.raises(ParseError):
            parse_bvh(text[:cut])


def test_truncation_without_newline_check_only_hits_last_token():
    # with the end-of-file check off, the only silent cases are cuts inside the last value
    text = MINIMAL
    tail = text.rstrip("\n").rsplit(" ", 1)[0]
    for cut in range(len(text)):
        try:
            parse_bvh(text[:cut], require_final_newline=False)
        except ParseError:
            continue
        assert cut > len(tail)


def test_channel_count_mismatch():
    bad = MINIMAL.replace("0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000",
                          "0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000")
    with pytest.raises(ParseError) as info:
        parse_bvh(bad)
    assert info.value.line == 19


def test_frame_count_mismatch():
    with pytest.raises(ParseError, match="2 frames"):
        parse_bvh(MINIMAL.replace("Frames: 1", "Frames: 2"))


@pytest.mark.parametrize("token", ["nan", "inf", "abc"])
def test_bad_numeric_token_reports_location(token):
    bad = MINIMAL[: MINIMAL.rindex("0.000000")] + token + "\n"
    with pytest.raises(ParseError) as info:
        parse_bvh(bad)
    assert info.value.line == 19
    assert info.value.column == len("0.000000 ") * 8 + 1


def test_unknown_channel():
    with pytest.raises(ParseError, match="Wrotation"):
        parse_bvh(MINIMAL.replace("Zrotation Xrotation Yrotation\n\t\tEnd", "Wrotation Xrotation Yrotation\n\t\tEnd"))


def test_skeleton_invariants():
    z = np.zeros(3)
    with pytest.raises(ValueError):
        Skeleton([Joint("a", None, z, []), Joint("b", None, z, [])])
    with pytest.raises(ValueError):
        Skeleton([Joint("a", None, z, []), Joint("b", 2, z, []), Joint("c", 0, z, [])])
    with pytest.raises(ValueError):
        Skeleton([Joint("a", None, z, ["Wrotation"])])


def test_motion_invariants():
    with pytest.raises(ValueError):
        MotionChannels(1 / 30, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        MotionChannels(1 / 30, np.array([[0.0, np.nan]]))
    with pytest.raises(ValueError):
        MotionChannels(0.0, np.zeros((1, 3)))


def test_serialize_rejects_width_mismatch():
    skel, _ = parse_bvh(MINIMAL)
    with pytest.raises(ValueError):
        serialize_bvh(skel, MotionChannels(1 / 30, np.zeros((1, 8))))
