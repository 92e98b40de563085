// SPDX-License-Identifier: Apache-2.0
#include "smoe/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "smoe/errors.hpp"
#include "smoe/hash.hpp"

namespace smoe {

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("invalid " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

double parse_double(std::string_view text, std::string_view what) {
  // strtod accepts the %.17g output of format_double exactly.
  const std::string owned(text);
  char* end = nullptr;
  const double value = std::strtod(owned.c_str(), &end);
  if (owned.empty() || end != owned.c_str() + owned.size() || !std::isfinite(value)) {
    throw ParseError("invalid " + std::string(what) + ": '" + owned + "'");
  }
  return value;
}

const std::string& TensorFile::meta_value(std::string_view key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw ParseError("missing header field '" + std::string(key) + "'");
}

const Tensor* TensorFile::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_tensor_file(std::ostream& out, const TensorFile& file) {
  out << file.magic << '\n';
  for (const auto& [k, v] : file.meta) out << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, t] : file.tensors) {
    out << "tensor " << name << ' ' << t.rank();
    for (std::size_t e : t.shape()) out << ' ' << e;
    out << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) out << (i ? " " : "") << format_double(t[i]);
    out << '\n';
  }
  out << "end\n";
}

TensorFile read_tensor_file(std::istream& in, std::string_view expected_magic) {
  TensorFile file;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError("line " + std::to_string(line_no) + ": " + msg);
  };

  if (!std::getline(in, line)) throw ParseError("line 1: empty file");
  ++line_no;
  if (line != expected_magic) throw fail("expected magic '" + std::string(expected_magic) + "', got '" + line + "'");
  file.magic = line;

  bool ended = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string tag;
    fields >> tag;
    if (tag == "end") {
      ended = true;
      break;
    }
    if (tag == "meta") {
      std::string key, value;
      fields >> key;
      std::getline(fields >> std::ws, value);
      if (key.empty()) throw fail("meta line without key");
      file.meta.emplace_back(key, value);
    } else if (tag == "tensor") {
      std::string name, rank_text;
      fields >> name >> rank_text;
      if (name.empty()) throw fail("tensor line without name");
      try {
        const std::size_t rank = parse_count(rank_text, "rank");
        Shape shape(rank);
        for (std::size_t& e : shape) {
          std::string text;
          fields >> text;
          e = parse_count(text, "extent");
        }
        if (rank == 0) throw ParseError("tensor '" + name + "' has rank 0");
        if (!std::getline(in, line)) throw ParseError("tensor '" + name + "' has no data line");
        ++line_no;
        std::istringstream values(line);
        std::vector<double> data;
        data.reserve(shape_size(shape));
        std::string text;
        while (values >> text) data.push_back(parse_double(text, "value of '" + name + "'"));
        file.tensors.emplace_back(name, Tensor(shape, std::move(data)));
      } catch (const ParseError& e) {
        throw fail(e.what());
      } catch (const DimensionError& e) {
        throw fail("tensor '" + name + "': " + e.what());
      }
    } else if (!tag.empty()) {
      throw fail("unknown record '" + tag + "'");
    }
  }
  if (!ended) throw ParseError("line " + std::to_string(line_no) + ": missing 'end' record");
  return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor_file(out, file);
  if (!out) throw IoError("write failed for " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view expected_magic) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_tensor_file(in, expected_magic);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_model(const std::filesystem::path& path, const BaseModel& model) {
  const ModelConfig& c = model.config;
  TensorFile file;
  file.magic = kModelMagic;
  file.meta = {{"n_layers", std::to_string(c.n_layers)},   {"d_model", std::to_string(c.d_model)},
               {"n_heads", std::to_string(c.n_heads)},     {"d_ff", std::to_string(c.d_ff)},
               {"vocab_size", std::to_string(c.vocab_size)}, {"max_seq_len", std::to_string(c.max_seq_len)},
               {"seed", std::to_string(c.seed)},           {"config_hash", hex64(c.hash())}};
  for (const auto& [name, t] : model.named_tensors()) file.tensors.emplace_back(name, *t);
  write_tensor_file(path, file);
}

BaseModel load_model(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path, kModelMagic);
  ModelConfig c;
  try {
    c.n_layers = parse_count(file.meta_value("n_layers"), "n_layers");
    c.d_model = parse_count(file.meta_value("d_model"), "d_model");
    c.n_heads = parse_count(file.meta_value("n_heads"), "n_heads");
    c.d_ff = parse_count(file.meta_value("d_ff"), "d_ff");
    c.vocab_size = parse_count(file.meta_value("vocab_size"), "vocab_size");
    c.max_seq_len = parse_count(file.meta_value("max_seq_len"), "max_seq_len");
    c.seed = std::stoull(file.meta_value("seed"));
    c.validate();
  } catch (const ContractError& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const std::logic_error&) {
    throw ParseError(path.string() + ": invalid seed field");
  }
  BaseModel model = init_model(c);
  for (auto& [name, t] : model.named_tensors()) {
    const Tensor* stored = file.find(name);
    if (!stored) throw ParseError(path.string() + ": missing tensor '" + name + "'");
    if (stored->shape() != t->shape()) {
      throw ParseError(path.string() + ": tensor '" + name + "' has shape " + shape_string(stored->shape()) +
                       ", expected " + shape_string(t->shape()));
    }
    *t = *stored;
  }
  return model;
}

}  // namespace smoe
