#pragma once

#include <string>

#include "fcss/error.hpp"

namespace fcss {

// Axis-aligned pixel rectangle [x, x + w) x [y, y + h).
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  static Rect full(int width, int height) { return {0, 0, width, height}; }

  bool empty() const { return w <= 0 || h <= 0; }
  int area() const { return empty() ? 0 : w * h; }
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }

  // Throws unless the rectangle is nonempty and inside a width x height image.
  void require_within(int width, int height, const char* what) const {
    if (empty()) throw ConfigError(std::string(what) + ": empty bounding box");
    if (x < 0 || y < 0 || x + w > width || y + h > height)
      throw ConfigError(std::string(what) + ": bounding box " + to_string() + " outside " +
                        std::to_string(width) + "x" + std::to_string(height) + " image");
  }

  std::string to_string() const {
    return std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," +
           std::to_string(h);
  }

  friend bool operator==(const Rect&, const Rect&) = default;
};

}  // namespace fcss
