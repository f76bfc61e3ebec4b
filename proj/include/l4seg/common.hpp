#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace l4s {

// Typed failure domains. The C API and the CLI map these onto their own
// error-code spaces, so keep the set stable.
enum class Err {
  usage,          // bad flags, bad config keys, invalid combinations
  io,             // filesystem failures
  bad_magic,      // weight container: wrong magic bytes
  bad_version,    // weight container: unsupported format version
  bad_header,     // weight container: header JSON malformed
  bad_offsets,    // weight container: overlapping / non-ascending offsets
  size_mismatch,  // weight container: nbytes inconsistent with shape*dtype
  truncated,      // weight container: payload shorter than header claims
  duplicate_name,
  missing_key,
  out_of_range,
  shape_mismatch,
  dtype_mismatch,
  not_scalar,
  tape_consumed,
  non_finite,
  no_convergence,
  config_mismatch,
  empty_dataset,
  unknown_symbol,
  already_exists,  // output dir present and --force not given
  runtime,
};

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] void fail(Err c, const std::string& msg);

const char* err_name(Err c);

// Deterministic RNG. mt19937_64's stream is pinned by the standard and the
// derived draws below use explicit formulas, so a (seed, call-sequence) pair
// reproduces bit-identically on a given machine.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0,1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive [lo, hi], unbiased enough for desk-scale use
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Box-Muller, no cached spare (keeps the stream position obvious)
  double normal();

  // resample |z| <= clip, then scale
  double trunc_normal(double stddev, double clip = 2.0);

  // independent derived stream; deterministic in (parent seed, tag)
  Rng fork(uint64_t tag) const;

 private:
  explicit Rng(std::mt19937_64 g) : gen_(g) {}
  std::mt19937_64 gen_;
};

uint64_t splitmix64(uint64_t x);

// Thread cap: min(hardware_concurrency, L4S_THREADS). Parallel loops split the
// index range into disjoint chunks, each processed sequentially, so results are
// bitwise identical for every thread count.
int max_threads();
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& body);

// SHA-256 (content hashes for run manifests)
std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::vector<uint8_t>& bytes);
std::string sha256_file_hex(const std::string& path);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t n);

// shortest round-trip decimal formatting, deterministic across runs
std::string fmt_double(double v);

}  // namespace l4s
