#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vcmamba/tensor.hpp"

namespace vcm {

struct GridShape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t cells() const { return height * width; }
  bool operator==(const GridShape&) const = default;
};

// Step taken to reach a token from its predecessor on the path. Codes are
// stable: they index the rows of the direction table.
enum class Direction : std::uint8_t { Begin = 0, Right = 1, Left = 2, Down = 3, Up = 4 };

inline constexpr std::size_t kDirectionCount = 5;

enum class PathId : std::uint8_t {
  RowSnakeTL = 0,
  RowSnakeBR = 1,
  ColSnakeTL = 2,
  ColSnakeBR = 3,
};

inline constexpr std::array<PathId, 4> kAllPaths = {
    PathId::RowSnakeTL, PathId::RowSnakeBR, PathId::ColSnakeTL,
    PathId::ColSnakeBR};

inline std::string_view to_string(PathId id) {
  switch (id) {
    case PathId::RowSnakeTL: return "RowSnakeTL";
    case PathId::RowSnakeBR: return "RowSnakeBR";
    case PathId::ColSnakeTL: return "ColSnakeTL";
    case PathId::ColSnakeBR: return "ColSnakeBR";
  }
  return "?";
}

inline std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::Begin: return "begin";
    case Direction::Right: return "right";
    case Direction::Left: return "left";
    case Direction::Down: return "down";
    case Direction::Up: return "up";
  }
  return "?";
}

// Accepts the enum spelling ("RowSnakeTL"), the short form ("row-tl") or
// the numeric code 0..3.
inline std::optional<PathId> parse_path_id(std::string_view text) {
  for (PathId id : kAllPaths) {
    if (text == to_string(id)) return id;
  }
  if (text == "row-tl") return PathId::RowSnakeTL;
  if (text == "row-br") return PathId::RowSnakeBR;
  if (text == "col-tl") return PathId::ColSnakeTL;
  if (text == "col-br") return PathId::ColSnakeBR;
  if (text.size() == 1 && text[0] >= '0' && text[0] <= '3') {
    return kAllPaths[static_cast<std::size_t>(text[0] - '0')];
  }
  return std::nullopt;
}

struct PathOrder {
  PathId id = PathId::RowSnakeTL;
  GridShape grid;
  // order[j] is the row-major flat index of the j-th visited cell.
  std::vector<std::size_t> order;
  std::vector<Direction> dirs;

  std::vector<int> direction_codes() const {
    std::vector<int> codes(dirs.size());
    for (std::size_t i = 0; i < dirs.size(); ++i) codes[i] = static_cast<int>(dirs[i]);
    return codes;
  }
};

inline Direction step_direction(const GridShape& grid, std::size_t from,
                                std::size_t to) {
  const auto fr = static_cast<long>(from / grid.width);
  const auto fc = static_cast<long>(from % grid.width);
  const auto tr = static_cast<long>(to / grid.width);
  const auto tc = static_cast<long>(to % grid.width);
  if (tr == fr && tc == fc + 1) return Direction::Right;
  if (tr == fr && tc == fc - 1) return Direction::Left;
  if (tc == fc && tr == fr + 1) return Direction::Down;
  if (tc == fc && tr == fr - 1) return Direction::Up;
  throw Error("cells " + std::to_string(from) + " and " + std::to_string(to) +
              " are not 4-neighbours");
}

inline PathOrder generate_path(const GridShape& grid, PathId id) {
  if (grid.height == 0 || grid.width == 0) {
    throw ValidationError("scan grid must be non-empty, got " +
                          std::to_string(grid.height) + "x" +
                          std::to_string(grid.width));
  }
  PathOrder path;
  path.id = id;
  path.grid = grid;
  path.order.reserve(grid.cells());
  const bool by_column = id == PathId::ColSnakeTL || id == PathId::ColSnakeBR;
  if (!by_column) {
    for (std::size_t r = 0; r < grid.height; ++r) {
      for (std::size_t k = 0; k < grid.width; ++k) {
        const std::size_t c = r % 2 == 0 ? k : grid.width - 1 - k;
        path.order.push_back(r * grid.width + c);
      }
    }
  } else {
    for (std::size_t c = 0; c < grid.width; ++c) {
      for (std::size_t k = 0; k < grid.height; ++k) {
        const std::size_t r = c % 2 == 0 ? k : grid.height - 1 - k;
        path.order.push_back(r * grid.width + c);
      }
    }
  }
  if (id == PathId::RowSnakeBR || id == PathId::ColSnakeBR) {
    std::reverse(path.order.begin(), path.order.end());
  }
  path.dirs.resize(path.order.size());
  path.dirs[0] = Direction::Begin;
  for (std::size_t j = 1; j < path.order.size(); ++j) {
    path.dirs[j] = step_direction(grid, path.order[j - 1], path.order[j]);
  }
  return path;
}

inline std::array<PathOrder, 4> generate_all_paths(const GridShape& grid) {
  return {generate_path(grid, PathId::RowSnakeTL),
          generate_path(grid, PathId::RowSnakeBR),
          generate_path(grid, PathId::ColSnakeTL),
          generate_path(grid, PathId::ColSnakeBR)};
}

inline std::vector<std::size_t> invert_permutation(
    const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t j = 0; j < order.size(); ++j) {
    if (order[j] >= order.size()) {
      throw ValidationError("permutation entry " + std::to_string(order[j]) +
                            " out of range");
    }
    inverse[order[j]] = j;
  }
  return inverse;
}

inline std::vector<std::size_t> invert_path(const PathOrder& path) {
  return invert_permutation(path.order);
}

namespace detail {

template <typename T>
Tensor<T> permute_last(const Tensor<T>& x, const std::vector<std::size_t>& order,
                       Shape out_shape, bool gather_direction) {
  const std::size_t length = order.size();
  const std::size_t rows = x.numel() / length;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data() + r * length;
    T* dst = out.data() + r * length;
    if (gather_direction) {
      for (std::size_t j = 0; j < length; ++j) dst[j] = src[order[j]];
    } else {
      for (std::size_t j = 0; j < length; ++j) dst[order[j]] = src[j];
    }
  }
  auto xn = x.node();
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, order, rows, length, gather_direction](Node<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * length;
          T* dx = xn->grad.data() + r * length;
          if (gather_direction) {
            for (std::size_t j = 0; j < length; ++j) dx[order[j]] += g[j];
          } else {
            for (std::size_t j = 0; j < length; ++j) dx[j] += g[order[j]];
          }
        }
      });
}

}  // namespace detail

// features [B,D,H,W] -> sequence [B,D,H*W] in path order.
template <typename T>
Tensor<T> gather_path(const Tensor<T>& features, const PathOrder& path) {
  require_rank(features, 4, "gather_path features");
  if (features.dim(2) != path.grid.height || features.dim(3) != path.grid.width) {
    throw ShapeError("gather_path: features " + shape_str(features.shape()) +
                     " do not match path grid " +
                     std::to_string(path.grid.height) + "x" +
                     std::to_string(path.grid.width));
  }
  return detail::permute_last(
      features, path.order,
      {features.dim(0), features.dim(1), path.grid.cells()}, true);
}

// Inverse of gather_path: sequence [B,D,L] -> features [B,D,H,W].
template <typename T>
Tensor<T> scatter_path(const Tensor<T>& sequence, const PathOrder& path) {
  require_rank(sequence, 3, "scatter_path sequence");
  if (sequence.dim(2) != path.grid.cells()) {
    throw ShapeError("scatter_path: sequence " + shape_str(sequence.shape()) +
                     " has wrong length for path of " +
                     std::to_string(path.grid.cells()) + " cells");
  }
  return detail::permute_last(sequence, path.order,
                              {sequence.dim(0), sequence.dim(1),
                               path.grid.height, path.grid.width},
                              false);
}

// Gathers a [B,K,L] sequence stored in raster order into path order.
template <typename T>
Tensor<T> reorder_sequence(const Tensor<T>& raster, const PathOrder& path) {
  require_rank(raster, 3, "reorder_sequence input");
  if (raster.dim(2) != path.grid.cells()) {
    throw ShapeError("reorder_sequence: sequence " + shape_str(raster.shape()) +
                     " has wrong length for path of " +
                     std::to_string(path.grid.cells()) + " cells");
  }
  return detail::permute_last(raster, path.order, raster.shape(), true);
}

}  // namespace vcm
