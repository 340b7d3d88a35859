#pragma once

#include "ragicl/linalg.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace ragicl {

struct AttentionParams;

// Named matrices plus string metadata. The text format writes every double
// with the shortest representation that parses back to the same bits:
//
//   ragicl-checkpoint 1
//   meta <key> <value...>
//   matrix <name> <rows> <cols>
//   <row-major values, one row per line>
//   end
struct Checkpoint {
  std::vector<std::pair<std::string, Mat>> matrices;
  std::map<std::string, std::string> meta;

  void add(std::string name, Mat m);
  const Mat& get(const std::string& name) const;  // throws std::out_of_range
  bool has(const std::string& name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);  // throws std::runtime_error on malformed input
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Layer `prefix`: <prefix>.key, .query, .value, .proj and meta <prefix>.heads.
void add_params(Checkpoint& ckpt, const std::string& prefix, const AttentionParams& params);
AttentionParams get_params(const Checkpoint& ckpt, const std::string& prefix);

std::string format_double(double v);

}  // namespace ragicl
