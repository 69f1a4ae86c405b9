"""DSL oracles: PID semantics, evaluation, parse/print identity, parameters."""

import numpy as np
import pytest

from propel.dsl import (
    And,
    AtomicPredicate,
    Combine,
    ConstAction,
    DslTypeError,
    IfThenElse,
    LibCall,
    Not,
    Or,
    ParseError,
    PidConfig,
    ProgramPolicy,
    eval_program,
    eval_program_batch,
    extract_params,
    inject_params,
    parse,
    pid_response,
    print_program,
    program_depth,
    typecheck,
)
from propel.envs import make_env
from propel.policies import ObservationWindow

# A two-branch lane-keeping style controller: guard on sensor 0, PID on
# sensor 1 with gains differing per branch. Parsed with named sensors.
GUARDED_PID_TEXT = (
    "if (s[TrackPos] < 0.011 and s[TrackPos] > -0.011) "
    "then PID<RPM, 0.45, 3.54, 0.03, 53.39> "
    "else PID<RPM, 0.39, 3.54, 0.03, 53.39>"
)
SENSOR_NAMES = {"TrackPos": 0, "RPM": 1}


def window_from_rows(rows, dt=1.0):
    return ObservationWindow(np.asarray(rows, dtype=float), dt)


def const_window(obs, k=10, dt=1.0):
    return ObservationWindow.initial(np.asarray(obs, dtype=float), k, dt)


# -- pid semantics -----------------------------------------------------------


def test_pid_constant_error_closed_form():
    # constant error e: response = kp*e + ki*k*dt*e (derivative term zero)
    cfg = PidConfig(sensor=0, target=0.45, kp=2.0, ki=0.5, kd=3.0)
    w = const_window([0.40], k=10, dt=0.1)
    e = 0.05
    assert pid_response(cfg, w) == pytest.approx(2.0 * e + 0.5 * 10 * 0.1 * e)


def test_pid_pure_proportional_hand_value():
    cfg = PidConfig(sensor=0, target=0.45, kp=1.0, ki=0.0, kd=0.0)
    w = const_window([0.40])
    assert pid_response(cfg, w) == pytest.approx(0.05)


def test_pid_pure_derivative_hand_value():
    # last two errors 0.0 then 0.1 with dt=0.05 -> (0.1 - 0.0)/0.05 = 2.0
    cfg = PidConfig(sensor=0, target=0.5, kp=0.0, ki=0.0, kd=1.0)
    rows = [[0.5]] * 8 + [[0.5], [0.4]]
    assert pid_response(cfg, window_from_rows(rows, dt=0.05)) == pytest.approx(2.0)


def test_pid_gain_linearity_property():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = window_from_rows(rng.normal(size=(10, 2)), dt=0.05)
        j = int(rng.integers(2))
        c = rng.normal()
        base = np.array(
            [
                pid_response(PidConfig(j, c, 1.0, 0.0, 0.0), w),
                pid_response(PidConfig(j, c, 0.0, 1.0, 0.0), w),
                pid_response(PidConfig(j, c, 0.0, 0.0, 1.0), w),
            ]
        )
        gains = rng.normal(size=3)
        combined = pid_response(PidConfig(j, c, *gains), w)
        assert combined == pytest.approx(float(gains @ base), abs=1e-10)


# -- program evaluation -------------------------------------------------------


def test_const_action_eval():
    assert np.allclose(eval_program(ConstAction((0.5,)), const_window([0.0]), 1), [0.5])


def test_if_then_else_branch_selection_on_newest():
    prog = IfThenElse(
        AtomicPredicate(0, "<", 0.0), ConstAction((-1.0,)), ConstAction((1.0,))
    )
    w_neg = const_window([-0.5]).advanced([-0.1])
    w_pos = const_window([-0.5]).advanced([0.1])
    assert eval_program(prog, w_neg, 1) == pytest.approx([-1.0])
    assert eval_program(prog, w_pos, 1) == pytest.approx([1.0])


def test_combine_add_and_scale():
    prog = Combine(
        "add", None, (ConstAction((1.0,)), Combine("scale", 2.0, (ConstAction((0.25,)),)))
    )
    assert eval_program(prog, const_window([0.0]), 1) == pytest.approx([1.5])


def test_libcall_routes_to_output_index():
    prog = LibCall(PidConfig(0, 0.5, 1.0, 0.0, 0.0, output_index=1))
    out = eval_program(prog, const_window([0.3, 0.0]), 2)
    assert out == pytest.approx([0.0, 0.2])


def test_guarded_pid_program_routes_by_guard():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    typecheck(prog, obs_dim=2, action_dim=1)
    inside = const_window([0.0, 0.39])  # |s0| < 0.011 -> target 0.45
    outside = const_window([0.5, 0.39])  # -> target 0.39
    a_in = eval_program(prog, inside, 1)
    a_out = eval_program(prog, outside, 1)
    e_in, e_out = 0.45 - 0.39, 0.39 - 0.39
    assert a_in == pytest.approx([3.54 * e_in + 0.03 * 10 * 1.0 * e_in])
    assert a_out == pytest.approx([0.0])


def test_batch_eval_matches_scalar_eval():
    rng = np.random.default_rng(3)
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    samples = rng.normal(scale=0.02, size=(64, 10, 2))
    batch = eval_program_batch(prog, samples, dt=1.0, action_dim=1)
    for i in range(64):
        one = eval_program(prog, window_from_rows(samples[i]), 1)
        assert np.allclose(batch[i], one, atol=1e-12)


def test_eval_is_pure():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    w = const_window([0.0, 0.2])
    assert np.array_equal(eval_program(prog, w, 1), eval_program(prog, w, 1))


def test_program_policy_on_env_spec():
    env = make_env("mountaincar")
    pol = ProgramPolicy(parse("PID<1, 0.0, -1.0, 0.0, 0.0>"), env.spec)
    w = env.reset_to([-0.5, 0.02])
    assert pol.act(w) == pytest.approx([0.02])


# -- typecheck ---------------------------------------------------------------


def test_typecheck_rejects_sensor_out_of_range():
    with pytest.raises(DslTypeError, match="sensor 5"):
        typecheck(LibCall(PidConfig(5, 0.0, 1.0, 0.0, 0.0)), obs_dim=2, action_dim=1)
    with pytest.raises(DslTypeError, match="sensor 3"):
        typecheck(
            IfThenElse(AtomicPredicate(3, "<", 0.0), ConstAction((0.0,)), ConstAction((0.0,))),
            obs_dim=2,
            action_dim=1,
        )


def test_typecheck_rejects_wrong_action_dim():
    with pytest.raises(DslTypeError, match="components"):
        typecheck(ConstAction((0.0, 1.0)), obs_dim=2, action_dim=1)
    with pytest.raises(DslTypeError, match="output index"):
        typecheck(
            LibCall(PidConfig(0, 0.0, 1.0, 0.0, 0.0, output_index=2)),
            obs_dim=2,
            action_dim=2,
        )


def test_program_depth():
    assert program_depth(ConstAction((0.0,))) == 0
    nested = IfThenElse(
        AtomicPredicate(0, "<", 0.0),
        IfThenElse(AtomicPredicate(0, ">", -1.0), ConstAction((0.0,)), ConstAction((1.0,))),
        ConstAction((2.0,)),
    )
    assert program_depth(nested) == 2


# -- parsing and printing -----------------------------------------------------


def test_parse_unknown_sensor_name():
    with pytest.raises(ParseError, match="Speed"):
        parse("PID<Speed, 0.0, 1.0, 0.0, 0.0>", sensor_names={"RPM": 1})


def test_parse_error_reports_position_and_expectation():
    with pytest.raises(ParseError, match=r"expected.*number.*line 1"):
        parse("if (s[0] < ) then 1.0 else 0.0")


def test_parse_error_on_trailing_garbage():
    with pytest.raises(ParseError, match="end of input"):
        parse("1.0 2.0")


def test_parse_scalar_and_vector_constants():
    assert parse("0.5") == ConstAction((0.5,))
    assert parse("-0.5") == ConstAction((-0.5,))
    assert parse("[0.5, -0.2]") == ConstAction((0.5, -0.2))


def test_parse_scale_and_sum():
    assert parse("2.0 * 0.5") == Combine("scale", 2.0, (ConstAction((0.5,)),))
    assert parse("1.0 + 2.0 + 3.0") == Combine(
        "add", None, (ConstAction((1.0,)), ConstAction((2.0,)), ConstAction((3.0,)))
    )


def test_parse_bool_precedence():
    prog = parse("if s[0] < 1.0 and s[0] > 0.0 or s[1] < 0.0 then 1.0 else 0.0")
    assert isinstance(prog.cond, Or)
    assert isinstance(prog.cond.terms[0], And)


def test_print_guarded_pid_round_trip():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    assert parse(print_program(prog)) == prog


def test_print_uses_numeric_indices():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    text = print_program(prog)
    assert "s[0]" in text and "PID<1," in text


# -- parameter vector ---------------------------------------------------------


def test_extract_const_params():
    pv = extract_params(ConstAction((0.5,)))
    assert pv.values == pytest.approx([0.5])
    assert pv.kinds == ["const"]


def test_extract_guarded_pid_params_has_length_10():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    pv = extract_params(prog)
    assert len(pv.values) == 10
    assert pv.kinds == [
        "threshold",
        "threshold",
        "target",
        "kp",
        "ki",
        "kd",
        "target",
        "kp",
        "ki",
        "kd",
    ]
    assert pv.values == pytest.approx(
        [0.011, -0.011, 0.45, 3.54, 0.03, 53.39, 0.39, 3.54, 0.03, 53.39]
    )


def test_inject_extract_identity():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    assert inject_params(prog, extract_params(prog).values) == prog


def test_inject_zeros_neutralizes_program():
    prog = parse(GUARDED_PID_TEXT, sensor_names=SENSOR_NAMES)
    zeroed = inject_params(prog, np.zeros(10))
    w = const_window([0.0, 0.39])
    assert eval_program(zeroed, w, 1) == pytest.approx([0.0])


def test_inject_wrong_length_rejected():
    with pytest.raises(AssertionError):
        inject_params(ConstAction((0.5,)), np.zeros(3))


# -- random round-trip sweep ---------------------------------------------------


def random_bool(rng, obs_dim, depth):
    kind = rng.integers(4) if depth > 0 else 0
    if kind == 0:
        return AtomicPredicate(
            int(rng.integers(obs_dim)), "<" if rng.random() < 0.5 else ">", round(rng.normal(), 4)
        )
    if kind == 1:
        return And(tuple(random_bool(rng, obs_dim, depth - 1) for _ in range(rng.integers(2, 4))))
    if kind == 2:
        return Or(tuple(random_bool(rng, obs_dim, depth - 1) for _ in range(rng.integers(2, 4))))
    return Not(random_bool(rng, obs_dim, depth - 1))


def random_program(rng, obs_dim, action_dim, depth):
    kind = rng.integers(5) if depth > 0 else rng.integers(2)
    if kind == 0:
        return ConstAction(tuple(round(v, 4) for v in rng.normal(size=action_dim)))
    if kind == 1:
        return LibCall(
            PidConfig(
                int(rng.integers(obs_dim)),
                round(rng.normal(), 4),
                round(rng.normal(), 4),
                round(rng.normal(), 4),
                round(rng.normal(), 4),
                int(rng.integers(action_dim)),
            )
        )
    if kind == 2:
        return IfThenElse(
            random_bool(rng, obs_dim, 2),
            random_program(rng, obs_dim, action_dim, depth - 1),
            random_program(rng, obs_dim, action_dim, depth - 1),
        )
    if kind == 3:
        return Combine(
            "add",
            None,
            tuple(
                random_program(rng, obs_dim, action_dim, depth - 1)
                for _ in range(rng.integers(2, 4))
            ),
        )
    return Combine(
        "scale", round(rng.normal(), 4), (random_program(rng, obs_dim, action_dim, depth - 1),)
    )


def test_property_parse_print_identity_1000_programs():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        prog = random_program(rng, obs_dim=3, action_dim=2, depth=3)
        assert parse(print_program(prog)) == prog


def test_property_inject_extract_identity_random_programs():
    rng = np.random.default_rng(43)
    for _ in range(200):
        prog = random_program(rng, obs_dim=3, action_dim=2, depth=3)
        assert inject_params(prog, extract_params(prog).values) == prog
