#include "latentcf/types.hpp"

#include <charconv>

#include "latentcf/errors.hpp"

namespace latentcf {

LatentBatch::LatentBatch(torch::Tensor values) : values_(std::move(values)) {
  if (!values_.defined() || values_.dim() != 2) {
    throw ArgumentError("latent batch must be a (B, D) tensor");
  }
  if (values_.size(0) < 1 || values_.size(1) < 1) {
    throw ArgumentError("latent batch must have B >= 1 and D >= 1");
  }
  if (!torch::isfinite(values_).all().item<bool>()) {
    throw ArgumentError("latent batch contains non-finite entries");
  }
}

LatentBatch LatentBatch::slice(int64_t begin, int64_t end) const {
  return LatentBatch(values_.slice(0, begin, end));
}

ImageBatch::ImageBatch(torch::Tensor values) : values_(std::move(values)) {
  if (!values_.defined() || values_.dim() != 4) {
    throw ArgumentError("image batch must be a (B, C, H, W) tensor");
  }
  if (values_.size(0) < 1) {
    throw ArgumentError("image batch must not be empty");
  }
}

ImageShape ImageBatch::shape() const { return {values_.size(1), values_.size(2), values_.size(3)}; }

bool ImageBatch::inRange(double lo, double hi, double tol) const {
  auto ok = values_.ge(lo - tol).logical_and(values_.le(hi + tol));
  return ok.all().item<bool>();
}

ImageBatch ImageBatch::slice(int64_t begin, int64_t end) const {
  return ImageBatch(values_.slice(0, begin, end));
}

std::string ClassPair::key() const { return std::to_string(query) + ":" + std::to_string(target); }

std::string ClassPair::slug() const { return std::to_string(query) + "-" + std::to_string(target); }

ClassPair ClassPair::parse(std::string_view text) {
  auto sep = text.find_first_of(":-");
  if (sep == std::string_view::npos || sep == 0 || sep + 1 >= text.size()) {
    throw ArgumentError("malformed class pair '" + std::string(text) + "', expected c:c'");
  }
  auto parseInt = [&](std::string_view part) {
    int64_t value = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (ec != std::errc() || ptr != part.data() + part.size() || value < 0) {
      throw ArgumentError("malformed class pair '" + std::string(text) + "'");
    }
    return value;
  };
  ClassPair pair{parseInt(text.substr(0, sep)), parseInt(text.substr(sep + 1))};
  if (pair.query == pair.target) {
    throw ArgumentError("class pair must name two distinct classes: " + std::string(text));
  }
  return pair;
}

}  // namespace latentcf
