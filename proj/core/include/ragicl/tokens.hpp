#pragma once

#include "ragicl/linalg.hpp"

namespace ragicl {

// Column layout of a token: [x1 | x2 | y].
struct TokenLayout {
  int d1 = 0;
  int d2 = 0;
  int dy = 0;

  int dim() const { return d1 + d2 + dy; }
  int x1_offset() const { return 0; }
  int x2_offset() const { return d1; }
  int y_offset() const { return d1 + d2; }
  bool operator==(const TokenLayout&) const = default;
};

// N context rows followed by one query row.
struct TokenMatrix {
  Mat rows;
  TokenLayout layout;

  int token_count() const { return static_cast<int>(rows.rows()); }
  int context_size() const { return token_count() - 1; }
  int query_index() const { return token_count() - 1; }
  Vec query_y() const { return rows.row(query_index()).segment(layout.y_offset(), layout.dy).transpose(); }
};

}  // namespace ragicl
