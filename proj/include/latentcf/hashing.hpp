#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

namespace latentcf {

/// Incremental SHA-256 (libsodium).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  /// Lowercase hex digest. The hasher must not be reused afterwards.
  std::string hexDigest();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

std::string sha256Hex(std::string_view data);
std::string sha256File(const std::filesystem::path& path);

std::string base64Encode(std::string_view bytes);
/// Throws ArgumentError on malformed input.
std::string base64Decode(std::string_view text);

}  // namespace latentcf
