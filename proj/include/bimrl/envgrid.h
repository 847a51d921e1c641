#pragma once

// Procedurally generated, partially observable gridworlds.
//
// Two families are built in: MultiRoom (a chain of rooms joined by closed
// doors, goal square in the last room) and KeyCorridor (a ball behind a
// locked door whose key lies in another room). A task fixes the layout; the
// agent sees the same layout in each of the four episodes of the task.
//
// Observation encoding: a 7x7 egocentric view, agent at view cell (3, 6)
// facing "up" the view. Entry (x, y, c) lives at index (x * 7 + y) * 3 + c.
// Channel 0 is the object id / 10, channel 1 the color id / 5, channel 2 the
// state id / 2, using these tables:
//
//   object: unseen 0, empty 1, wall 2, floor 3, door 4, key 5, ball 6, box 7,
//           goal 8, lava 9, agent 10
//   color:  red 0, green 1, blue 2, purple 3, yellow 4, grey 5
//   state:  open 0, closed 1, locked 2   (doors; 0 for everything else)
//
// Cells hidden behind walls or closed doors are encoded as unseen (0, 0, 0).

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bimrl::env {

inline constexpr int kViewSize = 7;
inline constexpr int kChannels = 3;
inline constexpr int kObsSize = kViewSize * kViewSize * kChannels;
inline constexpr int kNumActions = 7;
inline constexpr int kEpisodesPerTask = 4;

enum class Action : int { kLeft = 0, kRight, kForward, kPickup, kDrop, kToggle, kDone };

enum class ObjectType : std::uint8_t {
  kUnseen = 0,
  kEmpty = 1,
  kWall = 2,
  kFloor = 3,
  kDoor = 4,
  kKey = 5,
  kBall = 6,
  kBox = 7,
  kGoal = 8,
  kLava = 9,
  kAgent = 10,
};

enum class Color : std::uint8_t { kRed = 0, kGreen, kBlue, kPurple, kYellow, kGrey };
inline constexpr int kNumColors = 6;

enum class DoorState : std::uint8_t { kOpen = 0, kClosed = 1, kLocked = 2 };

inline constexpr double kMaxObjectId = 10.0;
inline constexpr double kMaxColorId = 5.0;
inline constexpr double kMaxStateId = 2.0;

enum class Family { kMultiRoom, kKeyCorridor };

std::string to_string(Family f);
Family family_from_string(const std::string& name);

class ParameterError : public std::invalid_argument {
 public:
  ParameterError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Cell {
  ObjectType type = ObjectType::kEmpty;
  Color color = Color::kRed;
  DoorState state = DoorState::kOpen;

  bool operator==(const Cell&) const = default;
};

struct Pos {
  int x = 0;
  int y = 0;
  bool operator==(const Pos&) const = default;
};

class Grid {
 public:
  Grid() = default;
  Grid(int width, int height) : width_(width), height_(height), cells_(width * height) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool in_bounds(Pos p) const { return p.x >= 0 && p.y >= 0 && p.x < width_ && p.y < height_; }
  const Cell& at(Pos p) const { return cells_[p.y * width_ + p.x]; }
  Cell& at(Pos p) { return cells_[p.y * width_ + p.x]; }
  void set(Pos p, Cell c) { at(p) = c; }
  void clear(Pos p) { at(p) = Cell{}; }

  int count(ObjectType t) const;
  bool operator==(const Grid&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<Cell> cells_;
};

struct FamilyParams {
  // MultiRoom
  int room_count = 2;
  int max_room_size = 4;
  // KeyCorridor
  int row_count = 1;
  int room_size = 3;
  // Episode horizon override; 0 selects the family default.
  int episode_horizon = 0;
};

struct Layout {
  Grid grid;
  Pos agent_start;
  int agent_dir = 0;  // 0 east, 1 south, 2 west, 3 north
};

struct TaskSpec {
  Family family = Family::kMultiRoom;
  std::uint64_t seed = 0;
  FamilyParams params;
  int episode_horizon = 0;  // H
  int task_horizon = 0;     // H+ = 4 H
  Layout layout;
};

struct Observation {
  std::array<double, kObsSize> values{};

  static constexpr int index(int x, int y, int c) { return (x * kViewSize + y) * kChannels + c; }
  double at(int x, int y, int c) const { return values[index(x, y, c)]; }
  bool operator==(const Observation&) const = default;
};

struct Transition {
  Observation obs;
  int action = 0;
  double reward = 0.0;
  bool episode_done = false;
  bool task_done = false;
};

// Default episode horizon for the family (MultiRoom 20 * rooms, KeyCorridor
// 30 * room_size * rows).
int default_horizon(Family family, const FamilyParams& params);

TaskSpec generate_task(Family family, std::uint64_t seed, const FamilyParams& params);

class GridEnv {
 public:
  Observation reset(const TaskSpec& task, int episode_index);
  Transition step(int action);

  bool episode_active() const { return active_; }
  int episode_index() const { return episode_; }
  int step_count() const { return steps_; }
  Pos agent_pos() const { return pos_; }
  int agent_dir() const { return dir_; }
  const Cell* carrying() const { return carrying_ ? &carried_ : nullptr; }
  const Grid& grid() const { return grid_; }
  Observation observe() const;

  // Full-grid debug rendering; the agent is drawn as > v < ^.
  std::string ascii() const;

 private:
  Pos front() const;
  double success_reward() const;

  Family family_ = Family::kMultiRoom;
  int horizon_ = 0;
  Grid grid_;
  Pos pos_;
  int dir_ = 0;
  bool carrying_ = false;
  Cell carried_;
  int steps_ = 0;
  int episode_ = 0;
  bool active_ = false;
};

// Steps a batch of environments in lock step.
class VecEnv {
 public:
  explicit VecEnv(std::size_t n) : envs_(n) {}

  std::vector<Observation> reset(const std::vector<TaskSpec>& tasks, int episode_index);
  std::vector<Transition> step(const std::vector<int>& actions);
  std::size_t size() const { return envs_.size(); }
  GridEnv& operator[](std::size_t i) { return envs_[i]; }

 private:
  std::vector<GridEnv> envs_;
};

}  // namespace bimrl::env
