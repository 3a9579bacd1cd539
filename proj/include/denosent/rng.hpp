#pragma once

#include <cstdint>
#include <string_view>

namespace denosent {

// Counter-based random stream. The n-th draw is a pure function of
// (seed, stream_id, n), so any draw can be replayed from the triple alone and
// streams forked with distinct tags never share state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream_id = 0,
                     std::uint64_t counter = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  // Standard normal via Box-Muller; consumes two draws.
  double normal();
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // A new stream keyed on this stream's identity and `tag`. Does not advance
  // this stream.
  RngStream fork(std::uint64_t tag) const;
  RngStream fork(std::string_view name) const;

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

}  // namespace denosent
