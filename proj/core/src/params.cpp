#include <cmath>
#include <cstring>
#include <fstream>

#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"
#include "json.hpp"

namespace ddsa::nn {

void ParamVector::add_segment(std::string name, std::size_t length) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter segment '" + name + "'");
  index_.emplace(name, layout_.size());
  layout_.push_back(Segment{std::move(name), values_.size(), length});
  values_.resize(values_.size() + length, 0.0);
}

const Segment& ParamVector::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw DimensionError("no parameter segment '" + std::string(name) + "'");
  return layout_[it->second];
}

std::span<double> ParamVector::segment(std::string_view name) {
  const Segment& s = find(name);
  return {values_.data() + s.offset, s.length};
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const Segment& s = find(name);
  return {values_.data() + s.offset, s.length};
}

bool ParamVector::has_segment(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

ParamVector ParamVector::zeros_like() const {
  ParamVector z = *this;
  std::fill(z.values_.begin(), z.values_.end(), 0.0);
  return z;
}

ParamVector ParamVector::reordered(std::span<const std::string> order) const {
  if (order.size() != layout_.size()) throw DimensionError("reordered: segment count mismatch");
  ParamVector out;
  for (const auto& name : order) {
    auto src = segment(name);
    out.add_segment(name, src.size());
    auto dst = out.segment(name);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

void ParamVector::validate() const {
  std::size_t expected = 0;
  for (const auto& s : layout_) {
    if (s.offset != expected) throw DimensionError("parameter layout is not contiguous at '" + s.name + "'");
    expected += s.length;
  }
  if (expected != values_.size()) throw DimensionError("parameter layout does not cover the buffer");
  for (double v : values_)
    if (!std::isfinite(v)) throw NumericError("non-finite parameter value");
}

void save_params(const ParamVector& params, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json layout = json::array();
  for (const auto& s : params.layout())
    layout.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
  json doc = {{"dtype", "f32le"}, {"n", params.size()}, {"layout", layout}};
  std::ofstream j(dir / "params.json");
  if (!j) throw FormatError("cannot write " + (dir / "params.json").string());
  j << doc.dump(1) << '\n';

  std::ofstream b(dir / "params.bin", std::ios::binary);
  for (double v : params.values()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                    static_cast<unsigned char>(bits >> 16),
                                    static_cast<unsigned char>(bits >> 24)};
    b.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

ParamVector load_params(const std::filesystem::path& dir) {
  using nlohmann::json;
  std::ifstream j(dir / "params.json");
  if (!j) throw FormatError("missing " + (dir / "params.json").string());
  ParamVector out;
  try {
    const json doc = json::parse(j);
    for (const auto& s : doc.at("layout")) {
      out.add_segment(s.at("name").get<std::string>(), s.at("length").get<std::size_t>());
      if (out.layout().back().offset != s.at("offset").get<std::size_t>())
        throw FormatError("params.json: non-contiguous layout");
    }
    if (doc.at("n").get<std::size_t>() != out.size()) throw FormatError("params.json: n disagrees with layout");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed params.json: ") + e.what());
  }
  std::ifstream b(dir / "params.bin", std::ios::binary);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  if (raw.size() != out.size() * 4) throw FormatError("params.bin length mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t bits = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                               (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    out.values()[i] = f;
  }
  return out;
}

}  // namespace ddsa::nn
