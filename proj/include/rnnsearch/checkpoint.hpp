// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "ATNS"                      magic
//   u32 version                 currently 1
//   u8  precision               bytes per value: 4 or 8
//   u32 n, m, l, n', K_x, K_y   dims
//   vocab source, vocab target  u32 count, then count x (u32 length, UTF-8 bytes);
//                               ids 0 and 1 are implicit
//   tensor table                u32 count, then count x (u32 name length, name,
//                               u32 rows, u32 cols, rows*cols IEEE-754 values)
//   u8  has_optimizer           0 or 1, followed by a second tensor table
//
// The parameter table carries one extra 1x1 entry "meta.context_mode"
// (0 = attention, 1 = fixed context).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/text_data.hpp"
#include "rnnsearch/trainer.hpp"

namespace rnnsearch {

inline constexpr char kCheckpointMagic[4] = {'A', 'T', 'N', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kModeTensor = "meta.context_mode";

template <typename Real>
struct Checkpoint {
  ContextMode mode = ContextMode::attention;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  ModelParams<Real> params;
  std::optional<OptimizerState<Real>> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(std::string_view s) {
    u32(checked_u32(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename Real>
  void real(Real v) {
    if constexpr (sizeof(Real) == 4) u32(std::bit_cast<std::uint32_t>(v));
    else u64(std::bit_cast<std::uint64_t>(v));
  }
  static std::uint32_t checked_u32(std::size_t v) {
    if (v > UINT32_MAX) throw DataError("checkpoint: value does not fit in 32 bits");
    return static_cast<std::uint32_t>(v);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  void need(std::size_t n, std::string_view what) const {
    if (data_.size() - pos_ < n) {
      throw DataError(concat("checkpoint truncated while reading ", what, " at byte ", pos_));
    }
  }
  std::uint8_t u8(std::string_view what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(std::string_view what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(std::string_view what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::string str(std::string_view what) {
    const auto n = u32(what);
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename Real>
  Real real(std::string_view what) {
    if constexpr (sizeof(Real) == 4) return std::bit_cast<Real>(u32(what));
    else return std::bit_cast<Real>(u64(what));
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

inline void write_vocab(ByteWriter& w, const Vocabulary& v) {
  const auto tokens = v.regular_tokens();
  w.u32(ByteWriter::checked_u32(tokens.size()));
  for (const auto& t : tokens) w.str(t);
}

inline Vocabulary read_vocab(ByteReader& r, std::string_view side) {
  const auto count = r.u32(side);
  std::vector<std::string> tokens;
  tokens.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) tokens.push_back(r.str(side));
  return Vocabulary(tokens);
}

template <typename Real>
using NamedTensors = std::vector<std::pair<std::string, const Tensor<Real>*>>;

template <typename Real>
void write_table(ByteWriter& w, const NamedTensors<Real>& table) {
  w.u32(ByteWriter::checked_u32(table.size()));
  for (const auto& [name, t] : table) {
    w.str(name);
    w.u32(ByteWriter::checked_u32(t->rows()));
    w.u32(ByteWriter::checked_u32(t->cols()));
    for (const Real v : t->span()) w.real(v);
  }
}

template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>>> read_table(ByteReader& r) {
  const auto count = r.u32("tensor count");
  std::vector<std::pair<std::string, Tensor<Real>>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str("tensor name");
    const std::size_t rows = r.u32(name), cols = r.u32(name);
    if (cols != 0 && rows > r.remaining() / (cols * sizeof(Real))) {
      throw DataError(concat("checkpoint truncated while reading ", name));
    }
    Tensor<Real> t(rows, cols);
    for (auto& v : t.span()) v = r.template real<Real>(name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(concat("cannot write ", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError(concat("failed writing ", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(concat("cannot open checkpoint ", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

template <typename Real>
std::string serialize_checkpoint(const Checkpoint<Real>& ck) {
  static_assert(sizeof(Real) == 4 || sizeof(Real) == 8);
  ck.params.validate();
  const auto& d = ck.params.dims;
  if (ck.source_vocab.size() != d.src_vocab || ck.target_vocab.size() != d.tgt_vocab) {
    throw DataError("checkpoint: vocabulary sizes disagree with model dims");
  }
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(sizeof(Real));
  for (std::size_t v : {d.hidden, d.embed, d.maxout, d.align, d.src_vocab, d.tgt_vocab}) {
    w.u32(detail::ByteWriter::checked_u32(v));
  }
  detail::write_vocab(w, ck.source_vocab);
  detail::write_vocab(w, ck.target_vocab);

  const Tensor<Real> mode(1, 1, ck.mode == ContextMode::fixed ? Real(1) : Real(0));
  detail::NamedTensors<Real> table;
  for (std::size_t i = 0; i < kParamCount; ++i) table.emplace_back(std::string(kParamNames[i]), &ck.params.tensors[i]);
  table.emplace_back(std::string(kModeTensor), &mode);
  detail::write_table(w, table);

  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    const Tensor<Real> rho(1, 1, static_cast<Real>(o.rho)), eps(1, 1, static_cast<Real>(o.epsilon));
    detail::NamedTensors<Real> opt{{"adadelta.rho", &rho}, {"adadelta.epsilon", &eps}};
    for (std::size_t i = 0; i < kParamCount; ++i) {
      opt.emplace_back("adadelta.mean_sq_grad." + std::string(kParamNames[i]), &o.mean_sq_grad[i]);
      opt.emplace_back("adadelta.mean_sq_delta." + std::string(kParamNames[i]), &o.mean_sq_delta[i]);
    }
    detail::write_table(w, opt);
  }
  return w.buffer();
}

template <typename Real>
void save_checkpoint(const Checkpoint<Real>& ck, const std::filesystem::path& path) {
  detail::atomic_write(path, serialize_checkpoint(ck));
}

/// Bytes per stored value (4 or 8), read from the header only.
inline int checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(detail::concat("cannot open checkpoint ", path.string()));
  char head[9];
  if (!in.read(head, 9)) throw DataError("checkpoint truncated while reading header");
  if (std::memcmp(head, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic bytes");
  return static_cast<unsigned char>(head[8]);
}

template <typename Real>
Checkpoint<Real> parse_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  char magic[4];
  for (auto& c : magic) c = static_cast<char>(r.u8("magic"));
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic bytes");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError(detail::concat("checkpoint: unsupported version ", version, " (expected ",
                                   kCheckpointVersion, ")"));
  }
  const auto precision = r.u8("precision");
  if (precision != sizeof(Real)) {
    throw DataError(detail::concat("checkpoint: stored precision is ", int(precision),
                                   " bytes, reader expects ", sizeof(Real)));
  }
  Checkpoint<Real> ck;
  auto& d = ck.params.dims;
  d.hidden = r.u32("dims");
  d.embed = r.u32("dims");
  d.maxout = r.u32("dims");
  d.align = r.u32("dims");
  d.src_vocab = r.u32("dims");
  d.tgt_vocab = r.u32("dims");
  try {
    d.validate();
  } catch (const Error& e) {
    throw DataError(detail::concat("checkpoint: ", e.what()));
  }
  ck.source_vocab = detail::read_vocab(r, "source vocabulary");
  ck.target_vocab = detail::read_vocab(r, "target vocabulary");
  if (ck.source_vocab.size() != d.src_vocab || ck.target_vocab.size() != d.tgt_vocab) {
    throw DataError(detail::concat("checkpoint: vocabulary sizes ", ck.source_vocab.size(), "/",
                                   ck.target_vocab.size(), " disagree with header ", d.src_vocab, "/",
                                   d.tgt_vocab));
  }

  auto table = detail::read_table<Real>(r);
  const auto specs = param_specs(d);
  ck.params.tensors.resize(kParamCount);
  std::vector<bool> seen(kParamCount, false);
  bool mode_seen = false;
  for (auto& [name, t] : table) {
    if (name == kModeTensor) {
      if (t.size() != 1 || (t[0] != Real(0) && t[0] != Real(1))) throw DataError("checkpoint: bad context mode entry");
      ck.mode = t[0] == Real(1) ? ContextMode::fixed : ContextMode::attention;
      mode_seen = true;
      continue;
    }
    std::size_t idx = kParamCount;
    for (std::size_t i = 0; i < kParamCount; ++i)
      if (kParamNames[i] == name) idx = i;
    if (idx == kParamCount) throw DataError(detail::concat("checkpoint: unknown tensor '", name, "'"));
    if (seen[idx]) throw DataError(detail::concat("checkpoint: duplicate tensor '", name, "'"));
    const auto& s = specs[idx];
    if (t.rows() != s.rows || t.cols() != s.cols) {
      throw DataError(detail::concat("checkpoint: tensor '", name, "' is ", t.shape_string(),
                                     " but the header dims require ", s.rows, "x", s.cols));
    }
    seen[idx] = true;
    ck.params.tensors[idx] = std::move(t);
  }
  for (std::size_t i = 0; i < kParamCount; ++i) {
    if (!seen[i]) throw DataError(detail::concat("checkpoint: missing tensor '", kParamNames[i], "'"));
  }
  if (!mode_seen) throw DataError("checkpoint: missing context mode entry");

  const auto has_opt = r.u8("optimizer flag");
  if (has_opt > 1) throw DataError("checkpoint: bad optimizer flag");
  if (has_opt == 1) {
    auto opt = detail::read_table<Real>(r);
    OptimizerState<Real> o;
    o.mean_sq_grad.resize(kParamCount);
    o.mean_sq_delta.resize(kParamCount);
    std::size_t found = 0;
    for (auto& [name, t] : opt) {
      if (name == "adadelta.rho") { o.rho = static_cast<double>(t[0]); ++found; continue; }
      if (name == "adadelta.epsilon") { o.epsilon = static_cast<double>(t[0]); ++found; continue; }
      bool matched = false;
      for (std::size_t i = 0; i < kParamCount && !matched; ++i) {
        const std::string p(kParamNames[i]);
        Tensor<Real>* slot = nullptr;
        if (name == "adadelta.mean_sq_grad." + p) slot = &o.mean_sq_grad[i];
        if (name == "adadelta.mean_sq_delta." + p) slot = &o.mean_sq_delta[i];
        if (!slot) continue;
        if (!t.same_shape(ck.params.tensors[i])) {
          throw DataError(detail::concat("checkpoint: optimizer tensor '", name, "' has wrong shape"));
        }
        *slot = std::move(t);
        matched = true;
        ++found;
      }
      if (!matched) throw DataError(detail::concat("checkpoint: unknown optimizer tensor '", name, "'"));
    }
    if (found != 2 + 2 * kParamCount) throw DataError("checkpoint: incomplete optimizer section");
    ck.optimizer = std::move(o);
  }
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes after the last section");
  return ck;
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<Real>(detail::read_file(path));
}

}  // namespace rnnsearch
