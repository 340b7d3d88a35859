#include "ragicl/checkpoint.hpp"

#include "ragicl/attention.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace ragicl {

namespace {

constexpr const char* kMagic = "ragicl-checkpoint";
constexpr int kVersion = 1;

double parse_double(const std::string& tok) {
  double v = 0.0;
  const auto* first = tok.data();
  const auto* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw std::runtime_error("checkpoint: bad number '" + tok + "'");
  return v;
}

}  // namespace

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf.data(), ptr);
}

void Checkpoint::add(std::string name, Mat m) {
  for (auto& [n, existing] : matrices) {
    if (n == name) {
      existing = std::move(m);
      return;
    }
  }
  matrices.emplace_back(std::move(name), std::move(m));
}

const Mat& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, m] : matrices) {
    if (n == name) return m;
  }
  throw std::out_of_range("checkpoint: no matrix named '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& entry : matrices) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << kMagic << ' ' << kVersion << '\n';
  for (const auto& [k, v] : ckpt.meta) os << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, m] : ckpt.matrices) {
    os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (j > 0) os << ' ';
        os << format_double(m(i, j));
      }
      os << '\n';
    }
  }
  os << "end\n";
}

Checkpoint read_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kMagic) throw std::runtime_error("checkpoint: missing header");
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  std::string tag;
  while (is >> tag) {
    if (tag == "end") return ckpt;
    if (tag == "meta") {
      std::string key;
      std::string value;
      is >> key;
      std::getline(is, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
    } else if (tag == "matrix") {
      std::string name;
      Eigen::Index rows = -1;
      Eigen::Index cols = -1;
      if (!(is >> name >> rows >> cols) || rows < 0 || cols < 0) {
        throw std::runtime_error("checkpoint: bad matrix header");
      }
      Mat m(rows, cols);
      std::string tok;
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated matrix '" + name + "'");
          m(i, j) = parse_double(tok);
        }
      }
      ckpt.add(name, std::move(m));
    } else {
      throw std::runtime_error("checkpoint: unexpected tag '" + tag + "'");
    }
  }
  throw std::runtime_error("checkpoint: missing end marker");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

void add_params(Checkpoint& ckpt, const std::string& prefix, const AttentionParams& params) {
  ckpt.add(prefix + ".key", params.key);
  ckpt.add(prefix + ".query", params.query);
  ckpt.add(prefix + ".value", params.value);
  ckpt.add(prefix + ".proj", params.proj);
  ckpt.meta[prefix + ".heads"] = std::to_string(params.heads);
}

AttentionParams get_params(const Checkpoint& ckpt, const std::string& prefix) {
  AttentionParams p;
  p.key = ckpt.get(prefix + ".key");
  p.query = ckpt.get(prefix + ".query");
  p.value = ckpt.get(prefix + ".value");
  p.proj = ckpt.get(prefix + ".proj");
  auto it = ckpt.meta.find(prefix + ".heads");
  p.heads = it == ckpt.meta.end() ? 1 : std::stoi(it->second);
  p.validate();
  return p;
}

}  // namespace ragicl
