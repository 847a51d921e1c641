#include "bimrl/envgrid.h"

#include <algorithm>
#include <sstream>

#include "bimrl/rng.h"

namespace bimrl::env {

namespace {

constexpr int kMultiRoomGridSize = 25;
constexpr int kMultiRoomMinRoomSize = 4;
constexpr int kKeyCorridorCols = 3;

constexpr Pos kDirVec[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};

Cell wall() { return Cell{ObjectType::kWall, Color::kGrey, DoorState::kOpen}; }

Cell door(Color c, DoorState s) { return Cell{ObjectType::kDoor, c, s}; }

Color random_color(Rng& rng) { return static_cast<Color>(rng.uniform_int(0, kNumColors)); }

bool is_empty(const Cell& c) { return c.type == ObjectType::kEmpty; }

bool can_overlap(const Cell& c) {
  switch (c.type) {
    case ObjectType::kEmpty:
    case ObjectType::kFloor:
    case ObjectType::kGoal:
    case ObjectType::kLava:
      return true;
    case ObjectType::kDoor:
      return c.state == DoorState::kOpen;
    default:
      return false;
  }
}

bool can_pickup(const Cell& c) {
  return c.type == ObjectType::kKey || c.type == ObjectType::kBall || c.type == ObjectType::kBox;
}

bool see_behind(const Cell& c) {
  if (c.type == ObjectType::kWall) return false;
  if (c.type == ObjectType::kDoor) return c.state == DoorState::kOpen;
  return true;
}

// Uniformly picks an empty cell inside [top, top + size) that is not
// `avoid`. Walls are rejected, so the result lies in the room interior.
Pos place_in(const Grid& g, Pos top, Pos size, Rng& rng, const Pos* avoid = nullptr) {
  for (int tries = 0; tries < 10000; ++tries) {
    Pos p{rng.uniform_int(top.x, std::min(top.x + size.x, g.width())),
          rng.uniform_int(top.y, std::min(top.y + size.y, g.height()))};
    if (!is_empty(g.at(p))) continue;
    if (avoid != nullptr && p == *avoid) continue;
    return p;
  }
  throw std::runtime_error("grid generation: no free cell in room");
}

void draw_room_walls(Grid& g, Pos top, Pos size) {
  for (int i = 0; i < size.x; ++i) {
    g.set({top.x + i, top.y}, wall());
    g.set({top.x + i, top.y + size.y - 1}, wall());
  }
  for (int j = 0; j < size.y; ++j) {
    g.set({top.x, top.y + j}, wall());
    g.set({top.x + size.x - 1, top.y + j}, wall());
  }
}

// ---- MultiRoom ----

struct Room {
  Pos top;
  Pos size;
  Pos entry_door;
};

class MultiRoomBuilder {
 public:
  MultiRoomBuilder(Rng& rng, int max_size) : rng_(rng), max_size_(max_size) {}

  // Recursively places `left` rooms starting with one whose entry door sits
  // on wall `entry_wall` (0 right, 1 south, 2 left, 3 north) at `entry`.
  bool place(int left, std::vector<Room>& rooms, int entry_wall, Pos entry) {
    const int sx = rng_.uniform_int(kMultiRoomMinRoomSize, max_size_ + 1);
    const int sy = rng_.uniform_int(kMultiRoomMinRoomSize, max_size_ + 1);
    int tx = 0, ty = 0;
    if (rooms.empty()) {
      tx = entry.x;
      ty = entry.y;
    } else if (entry_wall == 0) {
      tx = entry.x - sx + 1;
      ty = rng_.uniform_int(entry.y - sy + 2, entry.y);
    } else if (entry_wall == 1) {
      tx = rng_.uniform_int(entry.x - sx + 2, entry.x);
      ty = entry.y - sy + 1;
    } else if (entry_wall == 2) {
      tx = entry.x;
      ty = rng_.uniform_int(entry.y - sy + 2, entry.y);
    } else {
      tx = rng_.uniform_int(entry.x - sx + 2, entry.x);
      ty = entry.y;
    }
    if (tx < 0 || ty < 0) return false;
    if (tx + sx > kMultiRoomGridSize || ty + sy >= kMultiRoomGridSize) return false;
    // The previous room shares the entry door wall and is exempt.
    for (std::size_t r = 0; r + 1 < rooms.size(); ++r) {
      const Room& o = rooms[r];
      const bool apart = tx + sx < o.top.x || o.top.x + o.size.x <= tx || ty + sy < o.top.y ||
                         o.top.y + o.size.y <= ty;
      if (!apart) return false;
    }
    rooms.push_back(Room{{tx, ty}, {sx, sy}, entry});
    if (left == 1) return true;

    for (int attempt = 0; attempt < 8; ++attempt) {
      int walls[3];
      int n = 0;
      for (int w = 0; w < 4; ++w) {
        if (w != entry_wall) walls[n++] = w;
      }
      const int exit_wall = walls[rng_.uniform_int(0, 3)];
      const int next_entry_wall = (exit_wall + 2) % 4;
      Pos exit;
      if (exit_wall == 0) {
        exit = {tx + sx - 1, ty + rng_.uniform_int(1, sy - 1)};
      } else if (exit_wall == 1) {
        exit = {tx + rng_.uniform_int(1, sx - 1), ty + sy - 1};
      } else if (exit_wall == 2) {
        exit = {tx, ty + rng_.uniform_int(1, sy - 1)};
      } else {
        exit = {tx + rng_.uniform_int(1, sx - 1), ty};
      }
      if (place(left - 1, rooms, next_entry_wall, exit)) break;
    }
    return true;
  }

 private:
  Rng& rng_;
  int max_size_;
};

Layout generate_multiroom(std::uint64_t seed, const FamilyParams& p) {
  Rng rng(seed);
  // First room origin; chosen so that a room of maximal size fits.
  const Pos entry{rng.uniform_int(0, kMultiRoomGridSize - p.max_room_size + 1),
                  rng.uniform_int(0, kMultiRoomGridSize - p.max_room_size)};
  std::vector<Room> rooms;
  MultiRoomBuilder builder(rng, p.max_room_size);
  for (int tries = 0; static_cast<int>(rooms.size()) < p.room_count; ++tries) {
    if (tries > 10000) throw std::runtime_error("MultiRoom: could not place rooms");
    std::vector<Room> attempt;
    builder.place(p.room_count, attempt, 2, entry);
    if (attempt.size() > rooms.size()) rooms = std::move(attempt);
  }

  Layout layout;
  layout.grid = Grid(kMultiRoomGridSize, kMultiRoomGridSize);
  Grid& g = layout.grid;
  int prev_color = -1;
  for (std::size_t idx = 0; idx < rooms.size(); ++idx) {
    draw_room_walls(g, rooms[idx].top, rooms[idx].size);
    if (idx > 0) {
      int c = rng.uniform_int(0, prev_color < 0 ? kNumColors : kNumColors - 1);
      if (prev_color >= 0 && c >= prev_color) ++c;
      g.set(rooms[idx].entry_door, door(static_cast<Color>(c), DoorState::kClosed));
      prev_color = c;
    }
  }
  layout.agent_start = place_in(g, rooms.front().top, rooms.front().size, rng);
  layout.agent_dir = rng.uniform_int(0, 4);
  const Pos goal = place_in(g, rooms.back().top, rooms.back().size, rng, &layout.agent_start);
  g.set(goal, Cell{ObjectType::kGoal, Color::kGreen, DoorState::kOpen});
  return layout;
}

// ---- KeyCorridor ----

struct GridRoom {
  Pos top;
  Pos door_pos[4];
  bool has_door_pos[4] = {false, false, false, false};
  bool connected[4] = {false, false, false, false};
  bool locked = false;
};

class RoomGrid {
 public:
  RoomGrid(Rng& rng, int room_size, int rows, int cols)
      : rng_(rng), size_(room_size), rows_(rows), cols_(cols), rooms_(rows * cols) {
    grid_ = Grid((room_size - 1) * cols + 1, (room_size - 1) * rows + 1);
    for (int j = 0; j < rows; ++j) {
      for (int i = 0; i < cols; ++i) {
        GridRoom& r = room(i, j);
        r.top = {i * (size_ - 1), j * (size_ - 1)};
        draw_room_walls(grid_, r.top, {size_, size_});
      }
    }
    for (int j = 0; j < rows; ++j) {
      for (int i = 0; i < cols; ++i) {
        GridRoom& r = room(i, j);
        const int xl = r.top.x + 1, yl = r.top.y + 1;
        const int xm = r.top.x + size_ - 1, ym = r.top.y + size_ - 1;
        if (i < cols - 1) set_door_pos(r, 0, {xm, rng_.uniform_int(yl, ym)});
        if (j < rows - 1) set_door_pos(r, 1, {rng_.uniform_int(xl, xm), ym});
        if (i > 0) set_door_pos(r, 2, room(i - 1, j).door_pos[0]);
        if (j > 0) set_door_pos(r, 3, room(i, j - 1).door_pos[1]);
      }
    }
  }

  GridRoom& room(int i, int j) { return rooms_[j * cols_ + i]; }
  Grid& grid() { return grid_; }

  Pos neighbor(int i, int j, int k) const {
    return Pos{i + kDirVec[k].x, j + kDirVec[k].y};
  }
  bool has_neighbor(int i, int j, int k) const {
    Pos n = neighbor(i, j, k);
    return n.x >= 0 && n.y >= 0 && n.x < cols_ && n.y < rows_;
  }

  Color add_door(int i, int j, int k, Color c, bool locked) {
    GridRoom& r = room(i, j);
    grid_.set(r.door_pos[k], door(c, locked ? DoorState::kLocked : DoorState::kClosed));
    mark_connected(i, j, k);
    if (locked) r.locked = true;
    return c;
  }

  void remove_wall(int i, int j, int k) {
    GridRoom& r = room(i, j);
    const int tx = r.top.x, ty = r.top.y;
    for (int d = 1; d < size_ - 1; ++d) {
      if (k == 0) grid_.clear({tx + size_ - 1, ty + d});
      if (k == 1) grid_.clear({tx + d, ty + size_ - 1});
      if (k == 2) grid_.clear({tx, ty + d});
      if (k == 3) grid_.clear({tx + d, ty});
    }
    mark_connected(i, j, k);
  }

  Pos place_in_room(int i, int j, Cell obj, const Pos* avoid = nullptr) {
    GridRoom& r = room(i, j);
    Pos p = place_in(grid_, r.top, {size_, size_}, rng_, avoid);
    grid_.set(p, obj);
    return p;
  }

  Pos random_free_in_room(int i, int j) {
    GridRoom& r = room(i, j);
    return place_in(grid_, r.top, {size_, size_}, rng_);
  }

  // Adds closed doors between random neighbours until every room is
  // reachable from `start`.
  void connect_all(Pos start) {
    for (int itr = 0;; ++itr) {
      if (itr > 5000) throw std::runtime_error("KeyCorridor: connect_all did not converge");
      if (reachable_count(start) == rows_ * cols_) return;
      const int i = rng_.uniform_int(0, cols_);
      const int j = rng_.uniform_int(0, rows_);
      const int k = rng_.uniform_int(0, 4);
      GridRoom& r = room(i, j);
      if (!r.has_door_pos[k] || r.connected[k]) continue;
      Pos n = neighbor(i, j, k);
      if (r.locked || room(n.x, n.y).locked) continue;
      add_door(i, j, k, random_color(rng_), false);
    }
  }

 private:
  void set_door_pos(GridRoom& r, int k, Pos p) {
    r.door_pos[k] = p;
    r.has_door_pos[k] = true;
  }

  void mark_connected(int i, int j, int k) {
    room(i, j).connected[k] = true;
    Pos n = neighbor(i, j, k);
    room(n.x, n.y).connected[(k + 2) % 4] = true;
  }

  int reachable_count(Pos start) {
    std::vector<bool> seen(rooms_.size(), false);
    std::vector<Pos> stack{start};
    int count = 0;
    while (!stack.empty()) {
      Pos c = stack.back();
      stack.pop_back();
      const int idx = c.y * cols_ + c.x;
      if (seen[idx]) continue;
      seen[idx] = true;
      ++count;
      for (int k = 0; k < 4; ++k) {
        if (room(c.x, c.y).connected[k]) stack.push_back(neighbor(c.x, c.y, k));
      }
    }
    return count;
  }

  Rng& rng_;
  int size_;
  int rows_;
  int cols_;
  std::vector<GridRoom> rooms_;
  Grid grid_;
};

Layout generate_keycorridor(std::uint64_t seed, const FamilyParams& p) {
  Rng rng(seed);
  RoomGrid rg(rng, p.room_size, p.row_count, kKeyCorridorCols);
  for (int j = 1; j < p.row_count; ++j) rg.remove_wall(1, j, 3);

  const int locked_row = rng.uniform_int(0, p.row_count);
  const Color door_color = random_color(rng);
  rg.add_door(2, locked_row, 2, door_color, true);
  rg.place_in_room(2, locked_row, Cell{ObjectType::kBall, random_color(rng), DoorState::kOpen});
  rg.place_in_room(0, rng.uniform_int(0, p.row_count),
                   Cell{ObjectType::kKey, door_color, DoorState::kOpen});

  Layout layout;
  const int agent_row = p.row_count / 2;
  layout.agent_start = rg.random_free_in_room(1, agent_row);
  layout.agent_dir = rng.uniform_int(0, 4);
  rg.connect_all({1, agent_row});
  layout.grid = rg.grid();
  return layout;
}

void validate(Family family, const FamilyParams& p) {
  if (family == Family::kMultiRoom) {
    if (p.room_count < 2) throw ParameterError("room_count", "MultiRoom needs room_count >= 2");
    if (p.max_room_size < kMultiRoomMinRoomSize) {
      throw ParameterError("max_room_size", "MultiRoom needs max_room_size >= 4");
    }
    if (p.max_room_size > 10) throw ParameterError("max_room_size", "must be <= 10");
  } else {
    if (p.row_count < 1) throw ParameterError("row_count", "KeyCorridor needs row_count >= 1");
    if (p.room_size < 3) throw ParameterError("room_size", "KeyCorridor needs room_size >= 3");
  }
  if (p.episode_horizon < 0) throw ParameterError("episode_horizon", "must be >= 0");
}

}  // namespace

std::string to_string(Family f) {
  return f == Family::kMultiRoom ? "MultiRoom" : "KeyCorridor";
}

Family family_from_string(const std::string& name) {
  if (name == "MultiRoom") return Family::kMultiRoom;
  if (name == "KeyCorridor") return Family::kKeyCorridor;
  throw ParameterError("family", "unknown family '" + name + "'");
}

int Grid::count(ObjectType t) const {
  return static_cast<int>(
      std::count_if(cells_.begin(), cells_.end(), [t](const Cell& c) { return c.type == t; }));
}

int default_horizon(Family family, const FamilyParams& p) {
  return family == Family::kMultiRoom ? 20 * p.room_count : 30 * p.room_size * p.row_count;
}

TaskSpec generate_task(Family family, std::uint64_t seed, const FamilyParams& params) {
  validate(family, params);
  TaskSpec t;
  t.family = family;
  t.seed = seed;
  t.params = params;
  t.episode_horizon =
      params.episode_horizon > 0 ? params.episode_horizon : default_horizon(family, params);
  t.task_horizon = kEpisodesPerTask * t.episode_horizon;
  t.layout = family == Family::kMultiRoom ? generate_multiroom(seed, params)
                                          : generate_keycorridor(seed, params);
  return t;
}

// ---- GridEnv ----

Observation GridEnv::reset(const TaskSpec& task, int episode_index) {
  if (episode_index < 0 || episode_index >= kEpisodesPerTask) {
    throw ProtocolError("reset: episode_index " + std::to_string(episode_index) +
                        " outside [0, " + std::to_string(kEpisodesPerTask) + ")");
  }
  family_ = task.family;
  horizon_ = task.episode_horizon;
  grid_ = task.layout.grid;
  pos_ = task.layout.agent_start;
  dir_ = task.layout.agent_dir;
  carrying_ = false;
  carried_ = Cell{};
  steps_ = 0;
  episode_ = episode_index;
  active_ = true;
  return observe();
}

Pos GridEnv::front() const { return Pos{pos_.x + kDirVec[dir_].x, pos_.y + kDirVec[dir_].y}; }

double GridEnv::success_reward() const {
  return 1.0 - 0.9 * (static_cast<double>(steps_) / static_cast<double>(horizon_));
}

Transition GridEnv::step(int action) {
  if (!active_) throw ProtocolError("step: no active episode (reset first or episode is done)");
  if (action < 0 || action >= kNumActions) {
    throw std::invalid_argument("step: action " + std::to_string(action) + " outside [0, 7)");
  }
  ++steps_;
  Transition tr;
  tr.action = action;
  bool success = false;
  const Pos fp = front();
  const bool front_ok = grid_.in_bounds(fp);
  switch (static_cast<Action>(action)) {
    case Action::kLeft:
      dir_ = (dir_ + 3) % 4;
      break;
    case Action::kRight:
      dir_ = (dir_ + 1) % 4;
      break;
    case Action::kForward:
      if (front_ok && can_overlap(grid_.at(fp))) {
        pos_ = fp;
        if (family_ == Family::kMultiRoom && grid_.at(fp).type == ObjectType::kGoal) success = true;
      }
      break;
    case Action::kPickup:
      if (front_ok && !carrying_ && can_pickup(grid_.at(fp))) {
        carried_ = grid_.at(fp);
        carrying_ = true;
        grid_.clear(fp);
        if (family_ == Family::kKeyCorridor && carried_.type == ObjectType::kBall) success = true;
      }
      break;
    case Action::kDrop:
      if (front_ok && carrying_ && is_empty(grid_.at(fp))) {
        grid_.set(fp, carried_);
        carrying_ = false;
      }
      break;
    case Action::kToggle:
      if (front_ok && grid_.at(fp).type == ObjectType::kDoor) {
        Cell& d = grid_.at(fp);
        if (d.state == DoorState::kLocked) {
          if (carrying_ && carried_.type == ObjectType::kKey && carried_.color == d.color) {
            d.state = DoorState::kOpen;
          }
        } else {
          d.state = d.state == DoorState::kOpen ? DoorState::kClosed : DoorState::kOpen;
        }
      }
      break;
    case Action::kDone:
      break;
  }
  if (success) tr.reward = success_reward();
  tr.episode_done = success || steps_ >= horizon_;
  tr.task_done = tr.episode_done && episode_ == kEpisodesPerTask - 1;
  if (tr.episode_done) active_ = false;
  tr.obs = observe();
  return tr;
}

Observation GridEnv::observe() const {
  // view[i][j]: i = view column, j = view row; agent at (3, 6) facing up.
  Cell view[kViewSize][kViewSize];
  bool visible[kViewSize][kViewSize] = {};
  for (int i = 0; i < kViewSize; ++i) {
    for (int j = 0; j < kViewSize; ++j) {
      // Map view coordinates to the world: forward is -j, right is +i.
      const int fwd = (kViewSize - 1) - j;
      const int right = i - kViewSize / 2;
      const Pos f = kDirVec[dir_];
      const Pos r = kDirVec[(dir_ + 1) % 4];
      const Pos w{pos_.x + f.x * fwd + r.x * right, pos_.y + f.y * fwd + r.y * right};
      view[i][j] = grid_.in_bounds(w) ? grid_.at(w) : wall();
    }
  }
  const int ax = kViewSize / 2, ay = kViewSize - 1;
  view[ax][ay] = carrying_ ? carried_ : Cell{};

  // Visibility propagates row by row away from the agent; walls and closed
  // doors stop it.
  visible[ax][ay] = true;
  for (int j = kViewSize - 1; j >= 0; --j) {
    for (int i = 0; i < kViewSize - 1; ++i) {
      if (!visible[i][j] || !see_behind(view[i][j])) continue;
      visible[i + 1][j] = true;
      if (j > 0) {
        visible[i + 1][j - 1] = true;
        visible[i][j - 1] = true;
      }
    }
    for (int i = kViewSize - 1; i > 0; --i) {
      if (!visible[i][j] || !see_behind(view[i][j])) continue;
      visible[i - 1][j] = true;
      if (j > 0) {
        visible[i - 1][j - 1] = true;
        visible[i][j - 1] = true;
      }
    }
  }

  Observation obs;
  for (int i = 0; i < kViewSize; ++i) {
    for (int j = 0; j < kViewSize; ++j) {
      if (!visible[i][j]) continue;  // unseen stays (0, 0, 0)
      const Cell& c = view[i][j];
      const bool empty = c.type == ObjectType::kEmpty;
      obs.values[Observation::index(i, j, 0)] = static_cast<double>(c.type) / kMaxObjectId;
      obs.values[Observation::index(i, j, 1)] =
          empty ? 0.0 : static_cast<double>(c.color) / kMaxColorId;
      obs.values[Observation::index(i, j, 2)] =
          c.type == ObjectType::kDoor ? static_cast<double>(c.state) / kMaxStateId : 0.0;
    }
  }
  return obs;
}

std::string GridEnv::ascii() const {
  std::ostringstream os;
  static const char kAgent[4] = {'>', 'v', '<', '^'};
  for (int y = 0; y < grid_.height(); ++y) {
    for (int x = 0; x < grid_.width(); ++x) {
      if (Pos{x, y} == pos_) {
        os << kAgent[dir_];
        continue;
      }
      const Cell& c = grid_.at({x, y});
      switch (c.type) {
        case ObjectType::kWall: os << '#'; break;
        case ObjectType::kDoor:
          os << (c.state == DoorState::kOpen ? '/' : c.state == DoorState::kLocked ? 'L' : 'D');
          break;
        case ObjectType::kKey: os << 'K'; break;
        case ObjectType::kBall: os << 'B'; break;
        case ObjectType::kBox: os << 'X'; break;
        case ObjectType::kGoal: os << 'G'; break;
        case ObjectType::kLava: os << '~'; break;
        default: os << '.'; break;
      }
    }
    os << '\n';
  }
  return os.str();
}

std::vector<Observation> VecEnv::reset(const std::vector<TaskSpec>& tasks, int episode_index) {
  if (tasks.size() != envs_.size()) throw std::invalid_argument("VecEnv::reset: task count");
  std::vector<Observation> out;
  out.reserve(envs_.size());
  for (std::size_t i = 0; i < envs_.size(); ++i) out.push_back(envs_[i].reset(tasks[i], episode_index));
  return out;
}

std::vector<Transition> VecEnv::step(const std::vector<int>& actions) {
  if (actions.size() != envs_.size()) throw std::invalid_argument("VecEnv::step: action count");
  std::vector<Transition> out;
  out.reserve(envs_.size());
  for (std::size_t i = 0; i < envs_.size(); ++i) out.push_back(envs_[i].step(actions[i]));
  return out;
}

}  // namespace bimrl::env
