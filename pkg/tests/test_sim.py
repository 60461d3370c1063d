import numpy as np
import pytest

from volnav.config import load_config
from volnav.encoder import seeded_params
from volnav.policy import ActionDist, EpisodicGraph, seeded_policy_params, update_memory
from volnav.scene import Instruction
from volnav.sim import (
    STEP_LIMIT,
    STOP,
    EnvState,
    Episode,
    SimError,
    SimOptions,
    StepRecord,
    Trajectory,
    format_trajectory,
    memory_path,
    read_episodes,
    read_trajectories,
    run_episode,
    sample_episodes,
    step,
    trajectory_length,
    write_episodes,
    write_trajectories,
)

from conftest import SMALL


@pytest.fixture(scope="module")
def models():
    cfg = load_config(overrides=SMALL, use_env=False)
    return cfg, seeded_params(cfg.encoder_config(), 0), seeded_policy_params(cfg.policy_config(), 0)


def episode(scene, start="r0c", goal="r1c", max_steps=4, seed=3, dim=16):
    return Episode("e", Instruction.random(seed, 4, dim), start, (goal,), (), max_steps, seed)


def test_episode_validation(scene):
    with pytest.raises(SimError):
        episode(scene, start="nowhere").validate(scene)
    bad = Episode("e", Instruction.random(0, 2, 4), "r0c", ("r1c",), ("r0c", "r1c"))
    with pytest.raises(SimError):
        bad.validate(scene)  # not an edge


def test_memory_path_only_through_visited():
    g = EpisodicGraph()
    g = update_memory(g, "a", np.zeros(3), [("b", np.array([1.0, 0, 0]))], np.zeros((2, 2)))
    g = update_memory(g, "b", np.array([1.0, 0, 0]), [("c", np.array([2.0, 0, 0])), ("a", np.zeros(3))],
                      np.zeros((3, 2)))
    assert memory_path(g, "b", "a") == ["b", "a"]
    g2 = update_memory(g, "a", np.zeros(3), [("b", np.array([1.0, 0, 0]))], np.zeros((2, 2)))
    assert memory_path(g2, "a", "c") == ["a", "b", "c"]
    with pytest.raises(SimError):
        memory_path(g2, "a", "zz")


def test_step_stop_keeps_position(scene):
    g = update_memory(EpisodicGraph(), "r0c", scene.graph.positions["r0c"], [], np.zeros((1, 2)))
    state = EnvState(scene, "r0c", g, ["r0c"])
    new, walk = step(state, "r0c")
    assert walk == [] and new.current == "r0c"


def test_episode_terminates(scene, models):
    cfg, enc, pol = models
    for mode in ("argmax", "sample"):
        traj = run_episode(scene, episode(scene), enc, pol, SimOptions(mode, 1, "seeded", 0))
        assert traj.reason in (STOP, STEP_LIMIT)
        assert len(traj.steps) <= 4 and traj.path[0] == "r0c"
        for rec in traj.steps:
            assert abs(rec.dist.probs.sum() - 1) <= 1e-6
        for a, b in zip(traj.path, traj.path[1:]):
            assert b in scene.graph.neighbors(a)


def test_zero_step_budget(scene, models):
    _, enc, pol = models
    traj = run_episode(scene, episode(scene, max_steps=0), enc, pol, SimOptions(view_features="seeded"))
    assert traj.reason == STEP_LIMIT and traj.path == ["r0c"] and traj.steps == []


def test_same_seed_same_trajectory(scene, models):
    _, enc, pol = models
    opts = SimOptions("sample", 7, "seeded", 0)
    a = format_trajectory(run_episode(scene, episode(scene), enc, pol, opts))
    b = format_trajectory(run_episode(scene, episode(scene), enc, pol, opts))
    assert a == b


def test_trajectory_file_round_trip(tmp_path):
    dist = ActionDist(("a", "b"), [0.25, 0.75])
    t = Trajectory("e1", ["a", "b", "c", "b"], [
        StepRecord(1, "c", 0.6, dist, ["b", "c"]),
        StepRecord(2, "b", 0.7, dist, ["b"]),
        StepRecord(3, "b", 0.9, dist, []),
    ], STOP)
    text = format_trajectory(t)
    assert text.splitlines() == ["episode e1", "0 a nan", "1 b nan", "1 c 0.6", "2 b 0.7", "3 b 0.9", "end STOP"]
    write_trajectories([t, Trajectory("e2", ["x"], [], STEP_LIMIT)], tmp_path / "t.txt")
    back = read_trajectories(tmp_path / "t.txt")
    assert back == {"e1": (["a", "b", "c", "b"], STOP), "e2": (["x"], STEP_LIMIT)}


@pytest.mark.parametrize("text", ["episode e\n0 a nan\n", "episode e\n0 a\nend STOP\n", "episode e\nend DONE\n"])
def test_trajectory_reader_rejects_malformed(tmp_path, text):
    (tmp_path / "t.txt").write_text(text)
    with pytest.raises(SimError):
        read_trajectories(tmp_path / "t.txt")


def test_episodes_round_trip(scene, tmp_path):
    eps = sample_episodes(scene, 5, seed=2, dim=8)
    for ep in eps:
        ep.validate(scene)
        assert ep.gt_path[0] == ep.start and ep.gt_path[-1] == ep.goals[0]
    write_episodes(eps, tmp_path / "e.jsonl")
    back = read_episodes(tmp_path / "e.jsonl", dim=8)
    assert [e.episode_id for e in back] == [e.episode_id for e in eps]
    assert all(np.array_equal(a.instruction.tokens, b.instruction.tokens) for a, b in zip(eps, back))


def test_trajectory_length(scene):
    a, b = "r0c", scene.graph.neighbors("r0c")[0]
    assert trajectory_length([a, b, a], scene) == pytest.approx(2 * scene.graph.distance(a, b))
