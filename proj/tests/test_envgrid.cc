#include <doctest.h>

#include <deque>
#include <map>
#include <optional>

#include "bimrl/envgrid.h"
#include "bimrl/rng.h"

using namespace bimrl;
using namespace bimrl::env;

namespace {

struct ObjectCensus {
  int keys = 0;
  int locked_doors = 0;
  int closed_doors = 0;
  int goals = 0;
  int balls = 0;
};

// Walks the full layout cell by cell and tallies objects.
ObjectCensus census(const Grid& g) {
  ObjectCensus c;
  for (int y = 0; y < g.height(); ++y) {
    for (int x = 0; x < g.width(); ++x) {
      const Cell& cell = g.at({x, y});
      if (cell.type == ObjectType::kKey) ++c.keys;
      if (cell.type == ObjectType::kBall) ++c.balls;
      if (cell.type == ObjectType::kGoal) ++c.goals;
      if (cell.type == ObjectType::kDoor && cell.state == DoorState::kLocked) ++c.locked_doors;
      if (cell.type == ObjectType::kDoor && cell.state == DoorState::kClosed) ++c.closed_doors;
    }
  }
  return c;
}

constexpr Pos kDirs[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};

// Breadth-first search over cells (doors passable) from start to the first
// cell of `target` type.
std::vector<Pos> shortest_path(const Grid& g, Pos start, ObjectType target) {
  std::map<std::pair<int, int>, Pos> parent;
  std::deque<Pos> q{start};
  parent[{start.x, start.y}] = start;
  while (!q.empty()) {
    Pos p = q.front();
    q.pop_front();
    if (g.at(p).type == target) {
      std::vector<Pos> path{p};
      while (!(path.back() == start)) path.push_back(parent[{path.back().x, path.back().y}]);
      return {path.rbegin(), path.rend()};
    }
    for (Pos d : kDirs) {
      Pos n{p.x + d.x, p.y + d.y};
      if (!g.in_bounds(n) || parent.count({n.x, n.y})) continue;
      const ObjectType t = g.at(n).type;
      if (t == ObjectType::kWall) continue;
      parent[{n.x, n.y}] = p;
      q.push_back(n);
    }
  }
  return {};
}

int dir_between(Pos a, Pos b) {
  for (int d = 0; d < 4; ++d) {
    if (a.x + kDirs[d].x == b.x && a.y + kDirs[d].y == b.y) return d;
  }
  return -1;
}

// Drives the agent along a BFS path to the goal, toggling closed doors.
// Returns the final transition.
Transition walk_to_goal(GridEnv& env, int* steps_taken) {
  auto path = shortest_path(env.grid(), env.agent_pos(), ObjectType::kGoal);
  REQUIRE(path.size() >= 2);
  Transition last;
  int steps = 0;
  for (std::size_t k = 1; k < path.size(); ++k) {
    const int want = dir_between(path[k - 1], path[k]);
    while (env.agent_dir() != want) {
      last = env.step(((want - env.agent_dir() + 4) % 4) == 3 ? 0 : 1);
      ++steps;
    }
    if (env.grid().at(path[k]).type == ObjectType::kDoor &&
        env.grid().at(path[k]).state != DoorState::kOpen) {
      last = env.step(static_cast<int>(Action::kToggle));
      ++steps;
    }
    last = env.step(static_cast<int>(Action::kForward));
    ++steps;
  }
  *steps_taken = steps;
  return last;
}

void check_obs_invariants(const Observation& o) {
  for (double v : o.values) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

}  // namespace

TEST_CASE("generate_task is deterministic") {
  FamilyParams p;
  p.room_count = 4;
  p.max_room_size = 5;
  TaskSpec a = generate_task(Family::kMultiRoom, 0, p);
  TaskSpec b = generate_task(Family::kMultiRoom, 0, p);
  CHECK(a.layout.grid == b.layout.grid);
  CHECK(a.layout.agent_start == b.layout.agent_start);
  CHECK(a.layout.agent_dir == b.layout.agent_dir);
  CHECK(a.task_horizon == 4 * a.episode_horizon);
  CHECK(a.episode_horizon == 80);
  TaskSpec c = generate_task(Family::kMultiRoom, 1, p);
  CHECK_FALSE(a.layout.grid == c.layout.grid);
}

TEST_CASE("KeyCorridor S3R1 seed 7 has one key and one locked door") {
  FamilyParams p;
  p.row_count = 1;
  p.room_size = 3;
  TaskSpec t = generate_task(Family::kKeyCorridor, 7, p);
  ObjectCensus c = census(t.layout.grid);
  CHECK(c.keys == 1);
  CHECK(c.locked_doors == 1);
  CHECK(c.balls == 1);
  CHECK(t.episode_horizon == 90);
  // Key color matches the locked door color.
  Color key_color{}, door_color{};
  for (int y = 0; y < t.layout.grid.height(); ++y) {
    for (int x = 0; x < t.layout.grid.width(); ++x) {
      const Cell& cell = t.layout.grid.at({x, y});
      if (cell.type == ObjectType::kKey) key_color = cell.color;
      if (cell.type == ObjectType::kDoor && cell.state == DoorState::kLocked) door_color = cell.color;
    }
  }
  CHECK(key_color == door_color);
}

TEST_CASE("MultiRoom seed 3 has exactly one goal") {
  FamilyParams p;
  p.room_count = 2;
  p.max_room_size = 4;
  TaskSpec t = generate_task(Family::kMultiRoom, 3, p);
  ObjectCensus c = census(t.layout.grid);
  CHECK(c.goals == 1);
  CHECK(c.closed_doors == 1);
}

TEST_CASE("layouts are solvable and censuses hold across seeds") {
  FamilyParams mr;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    TaskSpec t = generate_task(Family::kMultiRoom, seed, mr);
    CHECK(census(t.layout.grid).goals == 1);
    CHECK(census(t.layout.grid).closed_doors == mr.room_count - 1);
    CHECK_FALSE(shortest_path(t.layout.grid, t.layout.agent_start, ObjectType::kGoal).empty());
  }
  FamilyParams kc;
  kc.row_count = 2;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    TaskSpec t = generate_task(Family::kKeyCorridor, seed, kc);
    ObjectCensus c = census(t.layout.grid);
    CHECK(c.keys == 1);
    CHECK(c.locked_doors == 1);
    CHECK_FALSE(shortest_path(t.layout.grid, t.layout.agent_start, ObjectType::kKey).empty());
    CHECK_FALSE(shortest_path(t.layout.grid, t.layout.agent_start, ObjectType::kBall).empty());
  }
}

TEST_CASE("invalid params name the offending field") {
  FamilyParams p;
  p.room_count = 1;
  try {
    generate_task(Family::kMultiRoom, 0, p);
    FAIL("expected ParameterError");
  } catch (const ParameterError& e) {
    CHECK(e.field() == "room_count");
  }
  FamilyParams k;
  k.row_count = 0;
  try {
    generate_task(Family::kKeyCorridor, 0, k);
    FAIL("expected ParameterError");
  } catch (const ParameterError& e) {
    CHECK(e.field() == "row_count");
  }
  CHECK_THROWS_AS(family_from_string("Maze"), ParameterError);
}

TEST_CASE("reset protocol") {
  TaskSpec t = generate_task(Family::kMultiRoom, 11, FamilyParams{});
  GridEnv env;
  Observation o0 = env.reset(t, 0);
  Observation o3 = env.reset(t, 3);
  CHECK(o0 == o3);
  CHECK(o0.values.size() == 7 * 7 * 3);
  check_obs_invariants(o0);
  CHECK_THROWS_AS(env.reset(t, 4), ProtocolError);
  CHECK_THROWS_AS(env.reset(t, -1), ProtocolError);
  GridEnv fresh;
  CHECK_THROWS_AS(fresh.step(0), ProtocolError);
  CHECK_THROWS_AS(env.step(7), std::invalid_argument);
}

TEST_CASE("agent cell and walls are encoded with the id tables") {
  TaskSpec t = generate_task(Family::kMultiRoom, 5, FamilyParams{});
  GridEnv env;
  Observation o = env.reset(t, 0);
  // The agent's own cell shows what it carries: nothing -> empty.
  CHECK(o.at(3, 6, 0) == doctest::Approx(1.0 / 10.0));
  CHECK(o.at(3, 6, 1) == 0.0);
  bool saw_wall = false;
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 7; ++j) saw_wall = saw_wall || o.at(i, j, 0) == 0.2;
  }
  CHECK(saw_wall);
}

TEST_CASE("forward into a wall leaves position unchanged") {
  TaskSpec t = generate_task(Family::kMultiRoom, 2, FamilyParams{});
  GridEnv env;
  env.reset(t, 0);
  // Turn until a wall is directly ahead, then walk into it.
  for (int turn = 0; turn < 4; ++turn) {
    Pos f{env.agent_pos().x + kDirs[env.agent_dir()].x, env.agent_pos().y + kDirs[env.agent_dir()].y};
    if (env.grid().at(f).type == ObjectType::kWall) break;
    Pos prev = env.agent_pos();
    Transition tr = env.step(static_cast<int>(Action::kForward));
    if (env.agent_pos() == prev) break;
    (void)tr;
  }
  // 2x2 interior: after at most one step forward there is a wall ahead.
  Pos f{env.agent_pos().x + kDirs[env.agent_dir()].x, env.agent_pos().y + kDirs[env.agent_dir()].y};
  if (env.grid().at(f).type != ObjectType::kWall) env.step(static_cast<int>(Action::kForward));
  f = {env.agent_pos().x + kDirs[env.agent_dir()].x, env.agent_pos().y + kDirs[env.agent_dir()].y};
  REQUIRE(env.grid().at(f).type == ObjectType::kWall);
  const Pos before = env.agent_pos();
  Transition tr = env.step(static_cast<int>(Action::kForward));
  CHECK(env.agent_pos() == before);
  CHECK(tr.reward == 0.0);
  CHECK_FALSE(tr.episode_done);
}

TEST_CASE("goal reward follows 1 - 0.9 t / H") {
  for (std::uint64_t seed : {1u, 4u, 9u, 21u}) {
    TaskSpec t = generate_task(Family::kMultiRoom, seed, FamilyParams{});
    GridEnv env;
    env.reset(t, 0);
    int steps = 0;
    Transition last = walk_to_goal(env, &steps);
    CHECK(last.episode_done);
    CHECK_FALSE(last.task_done);
    CHECK(last.reward == doctest::Approx(1.0 - 0.9 * steps / static_cast<double>(t.episode_horizon)));
    CHECK_THROWS_AS(env.step(0), ProtocolError);
    // The final episode of the task raises task_done.
    env.reset(t, 3);
    last = walk_to_goal(env, &steps);
    CHECK(last.task_done);
  }
}

TEST_CASE("locked door toggles only with the matching key") {
  FamilyParams p;
  TaskSpec t = generate_task(Family::kKeyCorridor, 7, p);
  // Find the locked door and put the agent in front of it.
  Pos door{};
  for (int y = 0; y < t.layout.grid.height(); ++y) {
    for (int x = 0; x < t.layout.grid.width(); ++x) {
      if (t.layout.grid.at({x, y}).state == DoorState::kLocked &&
          t.layout.grid.at({x, y}).type == ObjectType::kDoor) {
        door = {x, y};
      }
    }
  }
  TaskSpec probe = t;
  probe.layout.agent_start = {door.x - 1, door.y};  // locked door is on the west wall of the east room
  probe.layout.agent_dir = 0;
  REQUIRE(probe.layout.grid.at(probe.layout.agent_start).type == ObjectType::kEmpty);
  GridEnv env;
  env.reset(probe, 0);
  env.step(static_cast<int>(Action::kToggle));
  CHECK(env.grid().at(door).state == DoorState::kLocked);
  env.step(static_cast<int>(Action::kForward));
  CHECK(env.agent_pos() == probe.layout.agent_start);
}

TEST_CASE("KeyCorridor success requires key, unlock and ball pickup") {
  FamilyParams p;
  TaskSpec t = generate_task(Family::kKeyCorridor, 7, p);
  GridEnv env;
  env.reset(t, 0);
  // Scripted solve using BFS: key -> door -> ball.
  auto face_and_go = [&](ObjectType target, bool enter_last) -> Transition {
    auto path = shortest_path(env.grid(), env.agent_pos(), target);
    REQUIRE(path.size() >= 2);
    Transition last;
    for (std::size_t k = 1; k < path.size(); ++k) {
      const int want = dir_between(path[k - 1], path[k]);
      while (env.agent_dir() != want) last = env.step(((want - env.agent_dir() + 4) % 4) == 3 ? 0 : 1);
      const Cell& c = env.grid().at(path[k]);
      if (k + 1 == path.size() && !enter_last) break;
      if (c.type == ObjectType::kDoor && c.state == DoorState::kClosed) env.step(static_cast<int>(Action::kToggle));
      last = env.step(static_cast<int>(Action::kForward));
    }
    return last;
  };
  face_and_go(ObjectType::kKey, false);
  env.step(static_cast<int>(Action::kPickup));
  REQUIRE(env.carrying() != nullptr);
  CHECK(env.carrying()->type == ObjectType::kKey);
  // Walk to the locked door, unlock it.
  auto path = shortest_path(env.grid(), env.agent_pos(), ObjectType::kBall);
  REQUIRE(path.size() >= 2);
  for (std::size_t k = 1; k < path.size(); ++k) {
    const int want = dir_between(path[k - 1], path[k]);
    while (env.agent_dir() != want) env.step(((want - env.agent_dir() + 4) % 4) == 3 ? 0 : 1);
    const Cell c = env.grid().at(path[k]);
    if (c.type == ObjectType::kBall) break;
    if (c.type == ObjectType::kDoor && c.state != DoorState::kOpen) {
      env.step(static_cast<int>(Action::kToggle));
      CHECK(env.grid().at(path[k]).state == DoorState::kOpen);
    }
    Transition tr = env.step(static_cast<int>(Action::kForward));
    CHECK(tr.reward == 0.0);
  }
  // Drop the key somewhere free behind us, then pick up the ball.
  const int ball_dir = env.agent_dir();
  env.step(static_cast<int>(Action::kLeft));
  env.step(static_cast<int>(Action::kLeft));
  env.step(static_cast<int>(Action::kDrop));
  env.step(static_cast<int>(Action::kLeft));
  env.step(static_cast<int>(Action::kLeft));
  CHECK(env.agent_dir() == ball_dir);
  if (env.carrying() != nullptr) {
    // Back cell was occupied; drop sideways instead.
    env.step(static_cast<int>(Action::kLeft));
    env.step(static_cast<int>(Action::kDrop));
    env.step(static_cast<int>(Action::kRight));
  }
  REQUIRE(env.carrying() == nullptr);
  const int before = env.step_count();
  Transition tr = env.step(static_cast<int>(Action::kPickup));
  CHECK(tr.episode_done);
  CHECK(tr.reward == doctest::Approx(1.0 - 0.9 * (before + 1) / static_cast<double>(t.episode_horizon)));
}

TEST_CASE("random rollouts: observation invariants, sparse reward, replay determinism") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const Family fam = trial % 2 == 0 ? Family::kMultiRoom : Family::kKeyCorridor;
    TaskSpec t = generate_task(fam, rng.next(), FamilyParams{});
    std::vector<int> actions;
    for (int i = 0; i < t.episode_horizon; ++i) actions.push_back(rng.uniform_int(0, kNumActions));
    auto run = [&](GridEnv& env) {
      std::vector<Transition> out;
      check_obs_invariants(env.reset(t, 1));
      for (int a : actions) {
        out.push_back(env.step(a));
        if (out.back().episode_done) break;
      }
      return out;
    };
    GridEnv e1, e2;
    auto r1 = run(e1);
    auto r2 = run(e2);
    REQUIRE(r1.size() == r2.size());
    int nonzero = 0;
    for (std::size_t i = 0; i < r1.size(); ++i) {
      check_obs_invariants(r1[i].obs);
      CHECK(r1[i].obs == r2[i].obs);
      CHECK(r1[i].reward == r2[i].reward);
      CHECK(r1[i].reward >= 0.0);
      CHECK(r1[i].reward <= 1.0);
      if (r1[i].reward != 0.0) ++nonzero;
    }
    CHECK(nonzero <= 1);
    CHECK(r1.back().episode_done == (r1.size() == actions.size() || r1.back().reward > 0));
  }
}

TEST_CASE("vector env steps instances in lock step") {
  std::vector<TaskSpec> tasks{generate_task(Family::kMultiRoom, 1, FamilyParams{}),
                              generate_task(Family::kKeyCorridor, 2, FamilyParams{})};
  VecEnv vec(2);
  auto obs = vec.reset(tasks, 0);
  CHECK(obs.size() == 2);
  auto trs = vec.step({1, 0});
  CHECK(trs.size() == 2);
  CHECK(vec[0].step_count() == 1);
  CHECK(vec[1].step_count() == 1);
  CHECK_FALSE(vec[0].ascii().empty());
}
