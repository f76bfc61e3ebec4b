#include "l4seg/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <thread>

namespace l4s {

void fail(Err c, const std::string& msg) { throw Error(c, msg); }

const char* err_name(Err c) {
  switch (c) {
    case Err::usage: return "usage";
    case Err::io: return "io";
    case Err::bad_magic: return "bad_magic";
    case Err::bad_version: return "bad_version";
    case Err::bad_header: return "bad_header";
    case Err::bad_offsets: return "bad_offsets";
    case Err::size_mismatch: return "size_mismatch";
    case Err::truncated: return "truncated";
    case Err::duplicate_name: return "duplicate_name";
    case Err::missing_key: return "missing_key";
    case Err::out_of_range: return "out_of_range";
    case Err::shape_mismatch: return "shape_mismatch";
    case Err::dtype_mismatch: return "dtype_mismatch";
    case Err::not_scalar: return "not_scalar";
    case Err::tape_consumed: return "tape_consumed";
    case Err::non_finite: return "non_finite";
    case Err::no_convergence: return "no_convergence";
    case Err::config_mismatch: return "config_mismatch";
    case Err::empty_dataset: return "empty_dataset";
    case Err::unknown_symbol: return "unknown_symbol";
    case Err::already_exists: return "already_exists";
    case Err::runtime: return "runtime";
  }
  return "unknown";
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (hi < lo) fail(Err::usage, "uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(gen_() % span);
}

double Rng::normal() {
  // Box-Muller; u1 in (0,1] to keep log finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::trunc_normal(double stddev, double clip) {
  for (;;) {
    double z = normal();
    if (std::fabs(z) <= clip) return stddev * z;
  }
}

Rng Rng::fork(uint64_t tag) const {
  std::mt19937_64 probe = gen_;  // does not advance the parent
  uint64_t base = probe();
  return Rng(splitmix64(base ^ splitmix64(tag + 0x9e3779b97f4a7c15ull)));
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

int max_threads() {
  static int cached = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("L4S_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
  }();
  return cached;
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  int nt = max_threads();
  int64_t want = (n + grain - 1) / grain;
  if (want < nt) nt = static_cast<int>(want);
  if (nt <= 1) {
    body(0, n);
    return;
  }
  // fixed even split; chunk-to-thread assignment is static so no scheduling
  // effect can reach the output
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(nt - 1));
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  auto run = [&](int64_t b, int64_t e) {
    try {
      body(b, e);
    } catch (...) {
      if (!failed.exchange(true)) first_error = std::current_exception();
    }
  };
  int64_t per = n / nt, extra = n % nt, begin = 0;
  std::vector<std::pair<int64_t, int64_t>> ranges;
  for (int t = 0; t < nt; ++t) {
    int64_t len = per + (t < extra ? 1 : 0);
    ranges.emplace_back(begin, begin + len);
    begin += len;
  }
  for (int t = 1; t < nt; ++t) workers.emplace_back(run, ranges[t].first, ranges[t].second);
  run(ranges[0].first, ranges[0].second);
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// SHA-256, self-contained (FIPS 180-4)

namespace {

struct Sha256 {
  uint32_t h[8] = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
                   0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
  uint8_t buf[64];
  uint64_t total = 0;
  size_t fill = 0;

  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void block(const uint8_t* p) {
    static const uint32_t K[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    uint32_t w[64];
    for (int i = 0; i < 16; ++i)
      w[i] = (uint32_t(p[4 * i]) << 24) | (uint32_t(p[4 * i + 1]) << 16) |
             (uint32_t(p[4 * i + 2]) << 8) | uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 64; ++i) {
      uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      uint32_t S1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      uint32_t ch = (e & f) ^ (~e & g);
      uint32_t t1 = hh + S1 + ch + K[i] + w[i];
      uint32_t S0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      uint32_t t2 = S0 + maj;
      hh = g; g = f; f = e; e = d + t1; d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
  }

  void update(const uint8_t* p, size_t n) {
    total += n;
    while (n > 0) {
      size_t take = std::min(n, size_t(64) - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      n -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
  }

  std::string hex() {
    uint64_t bits = total * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    uint8_t zero = 0;
    while (fill != 56) update(&zero, 1);
    uint8_t len[8];
    for (int i = 0; i < 8; ++i) len[i] = uint8_t(bits >> (56 - 8 * i));
    update(len, 8);
    char out[65];
    for (int i = 0; i < 8; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
    return std::string(out, 64);
  }
};

}  // namespace

std::string sha256_hex(const void* data, size_t n) {
  Sha256 s;
  s.update(static_cast<const uint8_t*>(data), n);
  return s.hex();
}

std::string sha256_hex(const std::vector<uint8_t>& bytes) {
  return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_file_hex(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return sha256_hex(bytes);
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Err::io, "cannot open for reading: " + path);
  in.seekg(0, std::ios::end);
  std::streamoff n = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  if (n > 0) in.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!in) fail(Err::io, "short read: " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Err::io, "cannot open for writing: " + path);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail(Err::io, "short write: " + path);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace l4s
