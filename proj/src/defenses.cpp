#include "apattack/defenses.hpp"

#include <charconv>
#include <cmath>

#include "apattack/errors.hpp"
#include "apattack/rng.hpp"

namespace apattack {

namespace {

double parse_double(std::string_view text, std::string_view token) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(text), &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("bad number '" + std::string(text) + "' in defense token '" + std::string(token) + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_fraction(double v) {
  std::string s = std::to_string(v);
  while (s.size() > 1 && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.push_back('0');
  return s;
}

}  // namespace

Image jpeg_defense(const Image& image, int quality) {
  Image out = decode_jpeg(encode_jpeg(image, quality));
  if (out.height != image.height || out.width != image.width) throw Error("JPEG round trip changed the image size");
  return out;
}

Image randomization_defense(const Image& image, double low, double high, std::uint64_t seed) {
  if (!(low > 0.0 && low <= high && high <= 1.0)) {
    throw InputError("randomization scale range must satisfy 0 < low <= high <= 1");
  }
  Rng rng(seed);
  const double s = rng.uniform(low, high);
  const auto scaled = [s](std::size_t n) {
    const auto v = static_cast<std::size_t>(std::lround(s * static_cast<double>(n)));
    return std::clamp<std::size_t>(v, 1, n);
  };
  const std::size_t h = scaled(image.height), w = scaled(image.width);
  const Image small = resize_bilinear(image, h, w);
  const std::size_t top = static_cast<std::size_t>(rng.below(image.height - h + 1));
  const std::size_t left = static_cast<std::size_t>(rng.below(image.width - w + 1));
  Image out(image.height, image.width, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(top + y, left + x, c) = small.at(y, x, c);
  return out;
}

Image Defense::apply(const Image& image, std::uint64_t seed) const {
  if (kind == Kind::kJpeg) return jpeg_defense(image, quality);
  return randomization_defense(image, low, high, seed);
}

std::string Defense::token() const {
  if (kind == Kind::kJpeg) return "jpeg:" + std::to_string(quality);
  return "randomization:" + format_fraction(low) + "-" + format_fraction(high);
}

DefenseChain parse_defense_chain(std::string_view text) {
  DefenseChain chain;
  const std::string all = trim(text);
  if (all.empty() || all == "none") return chain;
  std::size_t start = 0;
  while (start <= all.size()) {
    const std::size_t comma = all.find(',', start);
    const std::string token = trim(std::string_view(all).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    start = comma == std::string::npos ? all.size() + 1 : comma + 1;
    if (token.empty()) throw ConfigError("empty token in defense chain '" + all + "'");
    const auto colon = token.find(':');
    const std::string name = token.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : token.substr(colon + 1);
    Defense d;
    if (name == "jpeg") {
      d.kind = Defense::Kind::kJpeg;
      if (!arg.empty()) {
        int q = 0;
        const auto [ptr, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), q);
        if (ec != std::errc() || ptr != arg.data() + arg.size()) {
          throw ConfigError("bad JPEG quality in defense token '" + token + "'");
        }
        d.quality = q;
      }
      if (d.quality < 1 || d.quality > 100) throw ConfigError("JPEG quality in '" + token + "' outside 1..100");
    } else if (name == "randomization") {
      d.kind = Defense::Kind::kRandomization;
      if (!arg.empty()) {
        const auto dash = arg.find('-');
        if (dash == std::string::npos) throw ConfigError("randomization token '" + token + "' needs low-high");
        d.low = parse_double(arg.substr(0, dash), token);
        d.high = parse_double(arg.substr(dash + 1), token);
      }
      if (!(d.low > 0.0 && d.low <= d.high && d.high <= 1.0)) {
        throw ConfigError("randomization range in '" + token + "' must satisfy 0 < low <= high <= 1");
      }
    } else {
      throw ConfigError("unknown defense '" + name + "' (expected jpeg or randomization)");
    }
    chain.push_back(d);
  }
  return chain;
}

std::string defense_chain_string(const DefenseChain& chain) {
  if (chain.empty()) return "none";
  std::string out;
  for (const auto& d : chain) out += (out.empty() ? "" : ",") + d.token();
  return out;
}

Image apply_defense_chain(const Image& image, const DefenseChain& chain, std::uint64_t seed) {
  Image out = image;
  for (std::size_t i = 0; i < chain.size(); ++i) out = chain[i].apply(out, Rng::derive(seed, i));
  return out;
}

}  // namespace apattack
